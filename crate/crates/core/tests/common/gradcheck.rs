//! Central finite-difference oracle. Evaluates the forward computation at
//! f64 and never touches the backward code it is checking.

use ade_core::model::Model;
use ade_core::numerics::{Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative error with a 1e-3 floor on the denominator, so coordinates whose
/// true gradient is ~0 are held to an absolute 1e-6.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| scale * (rng.random::<f64>() * 2.0 - 1.0))
}

/// Outcome of comparing analytic gradients with finite differences.
#[derive(Debug, Default, Clone)]
pub struct GradReport {
    pub checked: usize,
    pub passed: usize,
    pub worst: f64,
}

impl GradReport {
    pub fn record(&mut self, err: f64, tol: f64) {
        self.checked += 1;
        if err < tol {
            self.passed += 1;
        }
        self.worst = self.worst.max(err);
    }

    pub fn merge(&mut self, other: &GradReport) {
        self.checked += other.checked;
        self.passed += other.passed;
        self.worst = self.worst.max(other.worst);
    }

    pub fn pass_rate(&self) -> f64 {
        self.passed as f64 / self.checked.max(1) as f64
    }
}

/// `build` maps leaf handles to an output node; it is evaluated at both
/// precisions. The scalar under test is `sum(out ⊙ w)` for a fixed random
/// `w`.
pub struct OpCheck<F32, F64>
where
    F32: Fn(&mut Tape<f32>, &[Var]) -> Var,
    F64: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    pub inputs: Vec<Tensor<f64>>,
    pub build32: F32,
    pub build64: F64,
}

fn weighted_loss<T: Scalar>(tape: &mut Tape<T>, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(out).to_vec();
    let w = random_tensor(&mut rng, &shape, 1.0).cast::<T>();
    let w = tape.constant(w);
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

impl<F32, F64> OpCheck<F32, F64>
where
    F32: Fn(&mut Tape<f32>, &[Var]) -> Var,
    F64: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    fn loss64(&self, inputs: &[Tensor<f64>]) -> f64 {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = (self.build64)(&mut tape, &vars);
        let loss = weighted_loss(&mut tape, out, 99);
        tape.value(loss).item()
    }

    fn analytic<T: Scalar>(&self, build: impl Fn(&mut Tape<T>, &[Var]) -> Var) -> Vec<Vec<f64>> {
        let mut tape = Tape::<T>::new();
        let vars: Vec<Var> = self.inputs.iter().map(|t| tape.leaf(t.cast(), true)).collect();
        let out = build(&mut tape, &vars);
        let loss = weighted_loss(&mut tape, out, 99);
        let grads = tape.backward(loss).unwrap();
        vars.iter()
            .zip(&self.inputs)
            .map(|(v, t)| match grads.get(*v) {
                Some(g) => g.data().iter().map(|x| x.as_f64()).collect(),
                None => vec![0.0; t.numel()],
            })
            .collect()
    }

    fn finite_difference(&self, h: f64) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for (i, t) in self.inputs.iter().enumerate() {
            let mut g = Vec::with_capacity(t.numel());
            for c in 0..t.numel() {
                let mut plus = self.inputs.clone();
                plus[i].data_mut()[c] += h;
                let mut minus = self.inputs.clone();
                minus[i].data_mut()[c] -= h;
                g.push((self.loss64(&plus) - self.loss64(&minus)) / (2.0 * h));
            }
            out.push(g);
        }
        out
    }

    /// f32 analytic gradient vs f64 central differences at h = 1e-3.
    pub fn check_f32(&self) -> GradReport {
        // Evaluate at f32-representable points so both sides see the same input.
        let snapped = OpCheck {
            inputs: self.inputs.iter().map(|t| t.cast::<f32>().cast::<f64>()).collect(),
            build32: &self.build32,
            build64: &self.build64,
        };
        let analytic = snapped.analytic::<f32>(&self.build32);
        let fd = snapped.finite_difference(1e-3);
        compare(&analytic, &fd, 1e-3)
    }

    /// f64 analytic gradient vs f64 central differences at h = 1e-5.
    pub fn check_f64(&self) -> GradReport {
        let analytic = self.analytic::<f64>(&self.build64);
        let fd = self.finite_difference(1e-5);
        compare(&analytic, &fd, 1e-6)
    }
}

fn compare(analytic: &[Vec<f64>], fd: &[Vec<f64>], tol: f64) -> GradReport {
    let mut report = GradReport::default();
    for (a, f) in analytic.iter().zip(fd) {
        for (&x, &y) in a.iter().zip(f) {
            report.record(rel_err(x, y), tol);
        }
    }
    report
}

/// Mean next-token loss of `model` on `rows` packed rows.
pub fn model_loss<T: Scalar>(model: &Model<T>, tokens: &[u32], rows: usize) -> f64 {
    let mut tape = Tape::<T>::new();
    let (_, loss) = model.loss_on_tape(&mut tape, tokens, rows, false).unwrap();
    tape.value(loss).item().as_f64()
}

/// f32 analytic gradients of the full model loss vs f64 central differences
/// (h = 1e-4) on `samples` randomly chosen coordinates.
pub fn check_model(model: &Model<f32>, tokens: &[u32], rows: usize, samples: usize, seed: u64) -> GradReport {
    let mut tape = Tape::<f32>::new();
    let (pass, loss) = model.loss_on_tape(&mut tape, tokens, rows, true).unwrap();
    let grads = tape.backward(loss).unwrap();

    let base = model.cast::<f64>();
    let names: Vec<(String, usize)> = model
        .params()
        .iter()
        .map(|(n, p)| (n.clone(), p.value.numel()))
        .collect();
    let total: usize = names.iter().map(|(_, n)| n).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::default();
    let h = 1e-4;
    for _ in 0..samples {
        let mut flat = rng.random_range(0..total);
        let mut which = 0;
        while flat >= names[which].1 {
            flat -= names[which].1;
            which += 1;
        }
        let analytic = grads
            .get(pass.params[which])
            .map(|g| g.data()[flat] as f64)
            .unwrap_or(0.0);
        let eval = |delta: f64| {
            let mut m = base.clone();
            let mut params = m.params_mut();
            params[which].1.value.data_mut()[flat] += delta;
            drop(params);
            model_loss(&m, tokens, rows)
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        report.record(rel_err(analytic, fd), 1e-3);
    }
    report
}

/// Expands one closure body into an f32 and an f64 builder.
macro_rules! op_check {
    ($inputs:expr, |$tape:ident, $v:ident| $body:expr) => {
        $crate::common::gradcheck::OpCheck {
            inputs: $inputs,
            build32: |$tape: &mut ade_core::numerics::Tape<f32>,
                      $v: &[ade_core::numerics::Var]|
             -> ade_core::numerics::Var { $body },
            build64: |$tape: &mut ade_core::numerics::Tape<f64>,
                      $v: &[ade_core::numerics::Var]|
             -> ade_core::numerics::Var { $body },
        }
    };
}
#[allow(unused_imports)]
pub(crate) use op_check;

/// f32 checks of every tape op on fresh random inputs, by op name.
pub fn op_suite(seed: u64) -> Vec<(&'static str, GradReport)> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut t = |shape: &[usize], scale: f64| random_tensor(&mut r, shape, scale);
    vec![
        (
            "add",
            op_check!(vec![t(&[2, 3], 1.0), t(&[3], 1.0)], |tp, v| tp.add(v[0], v[1]).unwrap()).check_f32(),
        ),
        (
            "mul",
            op_check!(vec![t(&[2, 3], 1.0), t(&[2, 3], 1.0)], |tp, v| tp
                .mul(v[0], v[1])
                .unwrap())
            .check_f32(),
        ),
        (
            "scale",
            op_check!(vec![t(&[4, 3], 1.0)], |tp, v| tp.scale(v[0], 0.3)).check_f32(),
        ),
        (
            "sum",
            op_check!(vec![t(&[3, 4], 1.0)], |tp, v| tp.sum(v[0])).check_f32(),
        ),
        (
            "matmul",
            op_check!(vec![t(&[2, 3, 4], 1.0), t(&[4, 5], 1.0)], |tp, v| tp
                .matmul(v[0], v[1])
                .unwrap())
            .check_f32(),
        ),
        (
            "transpose",
            op_check!(vec![t(&[3, 5], 1.0)], |tp, v| tp.transpose(v[0]).unwrap()).check_f32(),
        ),
        (
            "reshape",
            op_check!(vec![t(&[3, 4], 1.0)], |tp, v| tp.reshape(v[0], &[2, 6]).unwrap()).check_f32(),
        ),
        (
            "gather_rows",
            op_check!(vec![t(&[5, 3], 1.0)], |tp, v| tp
                .gather_rows(v[0], &[4, 0, 4, 2], &[2, 2])
                .unwrap())
            .check_f32(),
        ),
        (
            "rmsnorm",
            op_check!(vec![t(&[3, 6], 1.0), t(&[6], 1.0)], |tp, v| tp
                .rmsnorm(v[0], v[1], 1e-5)
                .unwrap())
            .check_f32(),
        ),
        (
            "silu",
            op_check!(vec![t(&[4, 5], 3.0)], |tp, v| tp.silu(v[0])).check_f32(),
        ),
        (
            "rope",
            op_check!(vec![t(&[2, 5, 2, 4], 1.0)], |tp, v| tp.rope(v[0], 10_000.0).unwrap()).check_f32(),
        ),
        (
            "attention_scores",
            op_check!(vec![t(&[1, 4, 2, 2], 1.0), t(&[1, 4, 2, 2], 1.0)], |tp, v| tp
                .attention_scores(v[0], v[1], 0.7)
                .unwrap())
            .check_f32(),
        ),
        (
            "softmax_causal",
            op_check!(vec![t(&[2, 4, 4], 2.0)], |tp, v| tp.softmax_causal(v[0]).unwrap()).check_f32(),
        ),
        (
            "attention_mix",
            op_check!(vec![t(&[1, 2, 4, 4], 1.0), t(&[1, 4, 2, 3], 1.0)], |tp, v| tp
                .attention_mix(v[0], v[1])
                .unwrap())
            .check_f32(),
        ),
        (
            "cross_entropy",
            op_check!(vec![t(&[4, 6], 2.0)], |tp, v| tp
                .cross_entropy(v[0], &[0, 5, 2, 2])
                .unwrap())
            .check_f32(),
        ),
    ]
}
