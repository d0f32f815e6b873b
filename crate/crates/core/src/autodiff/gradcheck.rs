use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{precision, set_precision, Precision, Tensor};

use super::{Mode, ParamStore, Session, Var};

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Name and flat index of the worst coordinate, e.g. `input0[5]`.
    pub worst: String,
    /// Analytic and finite-difference derivative at the worst coordinate.
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

struct Restore(Precision);

impl Drop for Restore {
    fn drop(&mut self) {
        set_precision(self.0);
    }
}

/// Compare reverse-mode gradients of `f = <build(..), R>` (R a fixed random
/// tensor) against central differences, for every input tensor and every
/// parameter in `store`.
///
/// `n_trials` coordinates are sampled per tensor; 0 checks all of them. The
/// graph runs in train mode and double precision; the store is left as it was.
pub fn grad_check<F>(
    store: &mut ParamStore,
    inputs: &[Tensor],
    n_trials: usize,
    step: f64,
    seed: u64,
    build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Session, &[Var]) -> Result<Var>,
{
    grad_check_in(Mode::Train, store, inputs, n_trials, step, seed, build)
}

/// [`grad_check`] with the session in `mode`; in eval mode batch norm uses
/// the store's running statistics.
pub fn grad_check_in<F>(
    mode: Mode,
    store: &mut ParamStore,
    inputs: &[Tensor],
    n_trials: usize,
    step: f64,
    seed: u64,
    mut build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Session, &[Var]) -> Result<Var>,
{
    let _restore = Restore(precision());
    set_precision(Precision::F64);
    let pristine = store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let eval = |build: &mut F, store: &mut ParamStore, inputs: &[Tensor], r: &Tensor| -> Result<f64> {
        let (s, _, out) = run(mode, build, store, inputs)?;
        Ok(s.value(out).dot(r))
    };

    // Analytic pass.
    let (r, input_grads, param_grads) = {
        let (s, vars, out) = run(mode, &mut build, store, inputs)?;
        let r = Tensor::uniform(s.tape.shape(out), -1.0, 1.0, &mut rng);
        let grads = s.tape.backward(out, &r)?;
        let ig: Vec<Option<Tensor>> = vars.iter().map(|&v| grads.get(v).cloned()).collect();
        let pg: Vec<_> = s
            .bound_params()
            .map(|(id, v)| (id, grads.get(v).cloned()))
            .collect();
        (r, ig, pg)
    };
    *store = pristine.clone();

    let pick = |numel: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        if n_trials == 0 || n_trials >= numel {
            (0..numel).collect()
        } else {
            sample(rng, numel, n_trials).into_vec()
        }
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let record = |report: &mut GradCheckReport, name: String, analytic: f64, numeric: f64| {
        let e = relative_error(analytic, numeric);
        report.checked += 1;
        if e > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = e;
            report.worst = name;
            report.analytic = analytic;
            report.numeric = numeric;
        }
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, grad) in input_grads.iter().enumerate() {
        for i in pick(work[k].numel(), &mut rng) {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let fp = eval(&mut build, store, &work, &r)?;
            work[k].data_mut()[i] = orig - step;
            let fm = eval(&mut build, store, &work, &r)?;
            work[k].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let analytic = grad.as_ref().map_or(0.0, |g| g.data()[i]);
            record(&mut report, format!("input{k}[{i}]"), analytic, numeric);
        }
    }

    for (id, grad) in &param_grads {
        let numel = store.get(*id).value.numel();
        for i in pick(numel, &mut rng) {
            let orig = store.get(*id).value.data()[i];
            store.get_mut(*id).value.data_mut()[i] = orig + step;
            let fp = eval(&mut build, store, inputs, &r)?;
            store.get_mut(*id).value.data_mut()[i] = orig - step;
            let fm = eval(&mut build, store, inputs, &r)?;
            store.get_mut(*id).value.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let analytic = grad.as_ref().map_or(0.0, |g| g.data()[i]);
            let name = format!("{}[{i}]", store.get(*id).name);
            record(&mut report, name, analytic, numeric);
        }
    }
    *store = pristine;
    Ok(report)
}

fn run<'a, F>(mode: Mode, build: &mut F, store: &'a mut ParamStore, inputs: &[Tensor]) -> Result<(Session<'a>, Vec<Var>, Var)>
where
    F: FnMut(&mut Session, &[Var]) -> Result<Var>,
{
    let mut s = Session::new(store, mode);
    let vars: Vec<Var> = inputs.iter().map(|t| s.input_grad(t.clone())).collect();
    let out = build(&mut s, &vars)?;
    Ok((s, vars, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn linear_subgraph_is_exact_to_roundoff() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::uniform(Shape::new(3, 4, 1, 1), -1.0, 1.0, &mut rng), true);
        let b = store.add("b", Tensor::uniform(Shape::new(1, 3, 1, 1), -1.0, 1.0, &mut rng), false);
        let x = Tensor::uniform(Shape::new(2, 4, 1, 1), -1.0, 1.0, &mut rng);
        let rep = grad_check(&mut store, &[x], 0, 1e-5, 1, |s, v| {
            let (wv, bv) = (s.param(w), s.param(b));
            s.tape.linear(v[0], wv, Some(bv))
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-10, "{rep:?}");
        assert_eq!(rep.checked, 8 + 12 + 3);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut store = ParamStore::new();
        let x = Tensor::zeros(Shape::new(1, 1, 1, 1));
        let rep = grad_check(&mut store, &[x], 0, 1e-5, 2, |s, v| s.tape.sigmoid(v[0])).unwrap();
        assert!(rep.max_rel_error < 1e-9);
    }

    #[test]
    fn detects_a_broken_backward_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let x = Tensor::uniform(Shape::new(1, 2, 3, 3), -1.0, 1.0, &mut rng);
        super::super::inject_backward_fault(Some(super::super::OpKind::Sigmoid));
        let rep = grad_check(&mut store, &[x], 0, 1e-5, 2, |s, v| s.tape.sigmoid(v[0]));
        super::super::inject_backward_fault(None);
        assert!(rep.unwrap().max_rel_error > 0.1);
    }
}
