//! Registry of every differentiable op, each wrapped as a scalar function of
//! one input so [`finite_diff_check`](super::finite_diff_check) can probe it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{concat, lit, GradCheckOptions, GradCheckReport, Scalar, Tape, Tensor, Var};
use crate::error::TensorError;

pub type CaseFn<T> = Box<dyn for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>, TensorError> + Send + Sync>;

/// One op under test: `f` maps the checked input to a scalar.
pub struct OpCase<T: Scalar> {
    /// Name of the reverse rule exercised (what fault injection targets).
    pub op: &'static str,
    /// Op plus which argument is being differentiated.
    pub label: String,
    pub input: Tensor<T>,
    pub f: CaseFn<T>,
}

impl<T: Scalar> OpCase<T> {
    pub fn check(&self, opts: &GradCheckOptions) -> Result<GradCheckReport, TensorError> {
        super::finite_diff_check(&self.f, &self.input, opts)
    }
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| lit(rng.random_range(lo..hi))).collect())
}

/// `sum(y * w)` for a fixed random `w`, so every output coordinate carries a
/// distinct weight (a plain sum would hide errors in normalizing ops).
fn probe<'t, T: Scalar>(y: Var<'t, T>, w: &Tensor<T>) -> Result<Var<'t, T>, TensorError> {
    y.mul(y.tape().constant(w.clone()))?.sum()
}

struct Builder<T: Scalar> {
    rng: ChaCha8Rng,
    cases: Vec<OpCase<T>>,
}

impl<T: Scalar> Builder<T> {
    fn rand(&mut self, shape: &[usize]) -> Tensor<T> {
        uniform(&mut self.rng, shape, -1.0, 1.0)
    }

    fn positive(&mut self, shape: &[usize]) -> Tensor<T> {
        uniform(&mut self.rng, shape, 0.5, 1.5)
    }

    /// Registers `probe(g(x))`, with the probe weights sized from one dry run.
    fn add<G>(&mut self, op: &'static str, label: &str, input: Tensor<T>, g: G)
    where
        G: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>, TensorError> + Send + Sync + 'static,
    {
        let out_shape = {
            let tape = Tape::new();
            let x = tape.constant(input.clone());
            g(&tape, x).map(|y| y.shape()).expect("registered case builds")
        };
        let w = self.rand(&out_shape);
        let f: CaseFn<T> = if out_shape.is_empty() {
            Box::new(g)
        } else {
            Box::new(move |t, x| probe(g(t, x)?, &w))
        };
        self.cases.push(OpCase {
            op,
            label: label.to_string(),
            input,
            f,
        });
    }
}

/// Every registered op with small random inputs drawn from `seed`. Ops with
/// several differentiable arguments get one case per argument.
pub fn op_suite<T: Scalar>(seed: u64) -> Vec<OpCase<T>> {
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        cases: Vec::new(),
    };

    let c = b.rand(&[4]);
    let input = b.rand(&[2, 3, 4]);
    b.add("add", "add (broadcast rhs)", input, move |t, x| x.add(t.constant(c.clone())));
    let c = b.rand(&[2, 3, 4]);
    let input = b.rand(&[3, 4]);
    b.add("add", "add (broadcast lhs, positional embedding)", input, move |t, x| {
        t.constant(c.clone()).add(x)
    });
    let c = b.rand(&[2, 3]);
    let input = b.rand(&[2, 3]);
    b.add("sub", "sub (lhs)", input, move |t, x| x.sub(t.constant(c.clone())));
    let c = b.rand(&[2, 3]);
    let input = b.rand(&[2, 3]);
    b.add("sub", "sub (rhs)", input, move |t, x| t.constant(c.clone()).sub(x));
    let c = b.rand(&[3, 1]);
    let input = b.rand(&[3, 4]);
    b.add("mul", "mul (broadcast)", input, move |t, x| x.mul(t.constant(c.clone())));
    let input = b.rand(&[2, 3]);
    b.add("mul", "mul (square)", input, |_, x| x.square());
    let input = b.rand(&[5]);
    b.add("scalar_affine", "scalar affine", input, |_, x| x.affine(lit(1.7), lit(-0.3)));
    let input = b.rand(&[6]);
    b.add("sin", "sin", input, |_, x| x.sin());

    let c = b.rand(&[4, 5]);
    let input = b.rand(&[2, 3, 4]);
    b.add("matmul", "matmul (lhs, batched)", input, move |t, x| x.matmul(t.constant(c.clone())));
    let c = b.rand(&[2, 3, 4]);
    let input = b.rand(&[4, 5]);
    b.add("matmul", "matmul (rhs, broadcast)", input, move |t, x| t.constant(c.clone()).matmul(x));

    let input = b.rand(&[2, 5]);
    b.add("softmax", "softmax (last axis)", input, |_, x| x.softmax(1));
    let input = b.rand(&[2, 4, 3]);
    b.add("softmax", "softmax (inner axis)", input, |_, x| x.softmax(1));

    let (g, be) = (b.positive(&[5]), b.rand(&[5]));
    let input = b.rand(&[3, 5]);
    b.add("layernorm", "layernorm (input)", input, move |t, x| {
        x.layernorm(t.constant(g.clone()), t.constant(be.clone()), lit(1e-5))
    });
    let (xi, be) = (b.rand(&[3, 5]), b.rand(&[5]));
    let input = b.positive(&[5]);
    b.add("layernorm", "layernorm (gamma)", input, move |t, g| {
        t.constant(xi.clone()).layernorm(g, t.constant(be.clone()), lit(1e-5))
    });
    let (xi, g) = (b.rand(&[3, 5]), b.positive(&[5]));
    let input = b.rand(&[5]);
    b.add("layernorm", "layernorm (beta)", input, move |t, be| {
        t.constant(xi.clone()).layernorm(t.constant(g.clone()), be, lit(1e-5))
    });

    let x = uniform(&mut b.rng, &[8], -3.0, 3.0);
    b.add("gelu", "gelu", x, |_, x| x.gelu());

    let (w, bias) = (b.rand(&[3, 2, 3, 3]), b.rand(&[3]));
    let input = b.rand(&[1, 2, 5, 5]);
    b.add("conv2d", "conv2d (input, stride 2, padding 1)", input, move |t, x| {
        x.conv2d(t.constant(w.clone()), t.constant(bias.clone()), 2, 1)
    });
    let (x, bias) = (b.rand(&[2, 2, 4, 4]), b.rand(&[3]));
    let input = b.rand(&[3, 2, 3, 3]);
    b.add("conv2d", "conv2d (weight)", input, move |t, w| {
        t.constant(x.clone()).conv2d(w, t.constant(bias.clone()), 1, 1)
    });
    let (x, w) = (b.rand(&[1, 2, 4, 4]), b.rand(&[3, 2, 1, 1]));
    let input = b.rand(&[3]);
    b.add("conv2d", "conv2d (bias)", input, move |t, bias| {
        t.constant(x.clone()).conv2d(t.constant(w.clone()), bias, 1, 0)
    });

    let input = b.rand(&[1, 2, 3, 3]);
    b.add("interpolate_nearest", "interpolate_nearest (up)", input, |_, x| {
        x.interpolate_nearest(5, 7)
    });
    let input = b.rand(&[1, 1, 6, 5]);
    b.add("interpolate_nearest", "interpolate_nearest (down)", input, |_, x| {
        x.interpolate_nearest(3, 2)
    });
    let input = b.rand(&[1, 2, 6, 7]);
    b.add("downsample_area", "downsample_area (s=2)", input, |_, x| x.downsample_area(2));
    let input = b.rand(&[2, 1, 7, 6]);
    b.add("downsample_area", "downsample_area (s=3)", input, |_, x| x.downsample_area(3));

    let input = b.rand(&[2, 6]);
    b.add("reshape", "reshape", input, |_, x| x.reshape(&[3, 4]));
    let input = b.rand(&[2, 3, 4]);
    b.add("permute", "permute", input, |_, x| x.permute(&[2, 0, 1]));
    let c = b.rand(&[2, 2, 3]);
    let input = b.rand(&[2, 3, 3]);
    b.add("concat", "concat", input, move |t, x| concat(&[t.constant(c.clone()), x, x], 1));
    let input = b.rand(&[3, 4]);
    b.add("index_select", "index_select (repeated indices)", input, |_, x| {
        x.index_select(1, &[3, 0, 3, 1])
    });
    let input = b.rand(&[2, 4, 3]);
    b.add("gather_rows", "gather_rows", input, |_, x| x.gather_rows(&[2, 0, 1, 1], 2));
    let input = b.rand(&[3, 2]);
    b.add("sum", "sum", input, |_, x| x.sum());
    let input = b.rand(&[3, 2]);
    b.add("sum", "mean", input, |_, x| x.square()?.mean());
    let input = b.rand(&[2, 3, 4]);
    b.add("sum_axis", "sum_axis", input, |_, x| x.sum_axis(1));
    let input = b.rand(&[2, 3, 4]);
    b.add("sum_axis", "mean_axis", input, |_, x| x.mean_axis(2));
    let c = b.rand(&[3, 4]);
    let input = b.rand(&[3, 4]);
    b.add("mse", "mse", input, move |t, x| x.mse(t.constant(c.clone())));
    let input = b.rand(&[4, 5]);
    b.add("dropout", "dropout (fixed mask)", input, |_, x| {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        x.dropout(0.3, &mut rng)
    });
    let input = b.rand(&[3, 5]);
    b.add("cross_entropy", "cross_entropy", input, |_, x| x.cross_entropy(&[4, 0, 2]));

    b.cases
}
