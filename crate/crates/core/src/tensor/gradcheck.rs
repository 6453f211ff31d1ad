//! Central finite-difference checks for graph-built functions (double precision).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// ‖analytic − numeric‖₂ / ‖numeric‖₂ over all probed coordinates.
    pub rel_error: f64,
    pub probed: usize,
}

fn rel(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = numeric
        .iter()
        .map(|n| n * n)
        .sum::<f64>()
        .sqrt()
        .max(analytic.iter().map(|a| a * a).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn probe_indices(len: usize, max_probes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= max_probes {
        (0..len).collect()
    } else {
        (0..max_probes).map(|_| rng.gen_range(0..len)).collect()
    }
}

/// Checks gradients of `f` with respect to its explicit `inputs`.
pub fn check_inputs<Fun>(inputs: &[Tensor<f64>], step: f64, max_probes: usize, f: Fun) -> Result<GradCheck>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let mut work = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[k].shape());
        let ga = grads.var(*var).unwrap_or(&zeros);
        for i in probe_indices(inputs[k].len(), max_probes, &mut rng) {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * step));
            analytic.push(ga.data()[i]);
        }
    }
    Ok(GradCheck {
        rel_error: rel(&analytic, &numeric),
        probed: analytic.len(),
    })
}

/// Checks gradients of `f` with respect to every parameter array in `store`.
pub fn check_params<Fun>(
    store: &mut ParamStore<f64>,
    step: f64,
    max_probes_per_array: usize,
    f: Fun,
) -> Result<GradCheck>
where
    Fun: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    g.train(store);
    let out = f(&mut g, store)?;
    let grads = g.backward(out)?;
    let analytic_all: Vec<Tensor<f64>> = store
        .ids()
        .map(|id| {
            grads
                .param(store, id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
        })
        .collect();

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        Ok(g.value(out).data()[0])
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x7061_7261);
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let len = store.get(id).len();
        for i in probe_indices(len, max_probes_per_array, &mut rng) {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + step;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - step;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * step));
            analytic.push(analytic_all[k].data()[i]);
        }
    }
    Ok(GradCheck {
        rel_error: rel(&analytic, &numeric),
        probed: analytic.len(),
    })
}
