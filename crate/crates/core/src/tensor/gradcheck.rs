use super::{lit, DType, Scalar, Tape, Tensor, Var};
use crate::error::TensorError;

/// Step size and error normalization for [`finite_diff_check`].
#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Relative error is `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check at most this many coordinates, evenly spaced.
    pub max_coords: Option<usize>,
    /// Corrupt the reverse rule of the named op (fault-injection fixture).
    pub fault: Option<String>,
}

impl GradCheckOptions {
    pub fn for_dtype(dtype: DType) -> Self {
        match dtype {
            DType::Float64 => Self {
                h: 1e-6,
                floor: 1e-3,
                max_coords: None,
                fault: None,
            },
            DType::Float32 => Self {
                h: 1e-2,
                floor: 1e-1,
                max_coords: None,
                fault: None,
            },
        }
    }

    /// Default pass threshold for the dtype.
    pub fn tolerance(dtype: DType) -> f64 {
        match dtype {
            DType::Float64 => 1e-5,
            DType::Float32 => 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn eval<T, F>(f: &F, x: Tensor<T>) -> Result<f64, TensorError>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>, TensorError>,
{
    let tape = Tape::new();
    let out = f(&tape, tape.param(x))?;
    let v = out.value();
    if v.numel() != 1 {
        return Err(TensorError::Usage(format!("checked function must be scalar, got {:?}", v.shape())));
    }
    Ok(v.item().to_f64().unwrap_or(f64::NAN))
}

/// Compares the autodiff gradient of scalar `f` at `x` with central
/// differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, opts: &GradCheckOptions) -> Result<GradCheckReport, TensorError>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>, TensorError>,
{
    let analytic = {
        let tape = Tape::new();
        if let Some(op) = &opts.fault {
            tape.inject_backward_fault(op);
        }
        let xv = tape.param(x.clone());
        let out = f(&tape, xv)?;
        tape.backward(out)?;
        tape.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()))
    };

    let n = x.numel();
    let coords: Vec<usize> = match opts.max_coords {
        Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
        _ => (0..n).collect(),
    };
    let h: T = lit(opts.h);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: coords.len(),
    };
    let base = x.data().to_vec();
    for &i in &coords {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        // The effective step is what survived rounding in T.
        let step = (plus[i] - minus[i]).to_f64().unwrap_or(2.0 * opts.h);
        let fp = eval(&f, Tensor::from_parts(x.shape().to_vec(), plus))?;
        let fm = eval(&f, Tensor::from_parts(x.shape().to_vec(), minus))?;
        let numeric = (fp - fm) / step;
        let a = analytic.data()[i].to_f64().unwrap_or(f64::NAN);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
        if !(rel <= report.max_rel_error) {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}
