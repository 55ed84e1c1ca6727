use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::{lit, Scalar, Tensor};

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moment estimates keyed by parameter path.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub step: u64,
    pub first: BTreeMap<String, Tensor<T>>,
    pub second: BTreeMap<String, Tensor<T>>,
}

impl<T> Default for Moments<T> {
    fn default() -> Self {
        Self {
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> Moments<T> {
    pub fn cast<U: Scalar>(&self) -> Moments<U> {
        let c = |m: &BTreeMap<String, Tensor<T>>| m.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
        Moments {
            step: self.step,
            first: c(&self.first),
            second: c(&self.second),
        }
    }
}

/// Weight decay applies to matrices and conv kernels only; biases and norm
/// scales (rank 1) are exempt.
pub fn decays<T: Scalar>(value: &Tensor<T>) -> bool {
    value.rank() >= 2
}

/// One decoupled-weight-decay Adam step with bias correction over every
/// trainable parameter. Frozen parameters are never touched. A missing
/// gradient counts as zero. Nothing is modified if any gradient is
/// non-finite.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    moments: &mut Moments<T>,
    lr: f64,
    opt: &AdamW,
) -> Result<()> {
    for (name, g) in grads {
        let Some(p) = params.get(name) else {
            return Err(Error::Mismatch(format!("gradient for unknown parameter `{name}`")));
        };
        if g.shape() != p.value.shape() {
            return Err(Error::Mismatch(format!(
                "gradient shape {:?} for `{name}` of shape {:?}",
                g.shape(),
                p.value.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for `{name}`")));
        }
    }
    moments.step += 1;
    let t = moments.step as i32;
    let bc1: T = lit(1.0 - opt.beta1.powi(t));
    let bc2: T = lit(1.0 - opt.beta2.powi(t));
    let (b1, b2): (T, T) = (lit(opt.beta1), lit(opt.beta2));
    let (one, eps): (T, T) = (T::one(), lit(opt.eps));

    for (name, p) in params.iter_mut().filter(|(_, p)| p.trainable) {
        let (lr_t, decay): (T, T) = (lit(lr), lit(1.0 - lr * opt.weight_decay));
        let shape = p.value.shape().to_vec();
        let n = p.value.numel();
        let zeros = || Tensor::zeros(&shape);
        let g = grads.get(name).cloned().unwrap_or_else(zeros);
        let mut m = moments.first.remove(name).unwrap_or_else(zeros).into_vec();
        let mut v = moments.second.remove(name).unwrap_or_else(zeros).into_vec();
        let apply_decay = decays(&p.value);
        let mut w = p.value.data().to_vec();
        for i in 0..n {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            if apply_decay {
                w[i] *= decay;
            }
            w[i] -= lr_t * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
        }
        p.value = Tensor::new(shape.clone(), w)?;
        moments.first.insert(name.clone(), Tensor::new(shape.clone(), m)?);
        moments.second.insert(name.clone(), Tensor::new(shape, v)?);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::cosine_lr;

    const OPT: AdamW = AdamW {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };

    fn store(vals: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_f64(&[1, vals.len()], vals).unwrap(), true);
        s.insert("pos", Tensor::from_f64(&[1, 2], &[7.0, 8.0]).unwrap(), false);
        s
    }

    fn zero_grads(s: &ParamStore<f64>) -> BTreeMap<String, Tensor<f64>> {
        [("w".to_string(), Tensor::zeros(s.get("w").unwrap().value.shape()))].into()
    }

    #[test]
    fn zero_grads_no_decay_is_identity() {
        let mut s = store(&[1.0, -2.0]);
        let before = s.clone();
        let mut m = Moments::default();
        adamw_step(&mut s, &zero_grads(&before), &mut m, 0.1, &OPT).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn zero_grads_decay_is_pure_shrink() {
        let mut s = store(&[1.0, -2.0]);
        let mut m = Moments::default();
        let opt = AdamW { weight_decay: 0.05, ..OPT };
        let g = zero_grads(&s);
        adamw_step(&mut s, &g, &mut m, 0.1, &opt).unwrap();
        assert_eq!(s.get("w").unwrap().value.data(), &[1.0 * (1.0 - 0.1 * 0.05), -2.0 * (1.0 - 0.1 * 0.05)]);
        assert_eq!(s.get("pos").unwrap().value.data(), &[7.0, 8.0]);
    }

    #[test]
    fn lr_zero_changes_no_parameter() {
        let mut s = store(&[1.0, -2.0]);
        let before = s.clone();
        let mut m = Moments::default();
        let g = [("w".to_string(), Tensor::from_f64(&[1, 2], &[3.0, -1.0]).unwrap())].into();
        adamw_step(&mut s, &g, &mut m, 0.0, &AdamW { weight_decay: 0.05, ..OPT }).unwrap();
        assert_eq!(s, before);
        assert_eq!(m.step, 1);
    }

    #[test]
    fn bias_vectors_are_not_decayed() {
        let mut s = ParamStore::<f64>::new();
        s.insert("b", Tensor::from_f64(&[2], &[1.0, 1.0]).unwrap(), true);
        let mut m = Moments::default();
        adamw_step(&mut s, &BTreeMap::new(), &mut m, 0.1, &AdamW { weight_decay: 0.5, ..OPT }).unwrap();
        assert_eq!(s.get("b").unwrap().value.data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_finite_grad_names_parameter_and_leaves_state() {
        let mut s = store(&[1.0, -2.0]);
        let before = s.clone();
        let mut m = Moments::default();
        let g = [("w".to_string(), Tensor::from_f64(&[1, 2], &[f64::NAN, 0.0]).unwrap())].into();
        let err = adamw_step(&mut s, &g, &mut m, 0.1, &OPT).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(s, before);
        assert_eq!(m.step, 0);
    }

    #[test]
    fn converges_on_quadratic() {
        // f(x, y) = (x - 3)^2 + 10 (y + 1)^2, minimizer (3, -1).
        let mut s = store(&[0.0, 0.0]);
        let mut m = Moments::default();
        for step in 0..100 {
            let w = s.get("w").unwrap().value.data().to_vec();
            let g = [(
                "w".to_string(),
                Tensor::from_f64(&[1, 2], &[2.0 * (w[0] - 3.0), 20.0 * (w[1] + 1.0)]).unwrap(),
            )]
            .into();
            let lr = cosine_lr(step + 1, 100, 0, 0.3, 0.0);
            adamw_step(&mut s, &g, &mut m, lr, &AdamW { beta1: 0.8, ..OPT }).unwrap();
        }
        let w = s.get("w").unwrap().value.data().to_vec();
        assert!((w[0] - 3.0).abs() < 1e-3 && (w[1] + 1.0).abs() < 1e-3, "{w:?}");
    }
}
