//! Central finite-difference verification of tape gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::error::{NeuralError, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Entries sampled per parameter tensor.
    pub samples_per_param: usize,
    /// Denominator floor for the relative error.
    pub floor: f64,
    pub seed: u64,
    /// Entries whose error exceeds this are re-measured with a ten times
    /// smaller step, which separates activation kinks inside `±step` from
    /// real gradient errors.
    pub refine_above: f64,
    /// Restrict the check to these parameters.
    pub only: Option<Vec<ParamId>>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            samples_per_param: 4,
            floor: 1e-4,
            seed: 0,
            refine_above: 1e-6,
            only: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
    /// Entries that needed the smaller step.
    pub refined: usize,
}

/// Compares analytic gradients of the scalar built by `f` with central
/// differences on a seeded sample of parameter entries.
pub fn grad_check<F>(store: &ParamStore<f64>, f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        if !g.value(loss).scalar().is_finite() {
            return Err(NeuralError::NonFiniteValue);
        }
        g.backward(loss)?
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(s);
        let loss = f(&mut g)?;
        let v = g.value(loss).scalar();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(NeuralError::NonFiniteValue)
        }
    };

    let mut rng = rand::rngs::StdRng::seed_from_u64(cfg.seed);
    let ids: Vec<ParamId> = cfg.only.clone().unwrap_or_else(|| store.ids().collect());
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        refined: 0,
    };
    let mut probe = store.clone();
    for id in ids {
        let n = store.value(id).len();
        let mut entries: Vec<usize> = (0..n).collect();
        entries.shuffle(&mut rng);
        entries.truncate(cfg.samples_per_param);
        for e in entries {
            let exact = analytic.get(id).map_or(0.0, |t| t.data()[e]);
            let mut measure = |step: f64| -> Result<(f64, f64)> {
                let base = store.value(id).data()[e];
                probe.value_mut(id).data_mut()[e] = base + step;
                let plus = eval(&probe)?;
                probe.value_mut(id).data_mut()[e] = base - step;
                let minus = eval(&probe)?;
                probe.value_mut(id).data_mut()[e] = base;
                let numeric = (plus - minus) / (2.0 * step);
                Ok((numeric, (numeric - exact).abs() / numeric.abs().max(exact.abs()).max(cfg.floor)))
            };
            let (mut numeric, mut rel) = measure(cfg.step)?;
            if rel > cfg.refine_above {
                let (n2, r2) = measure(cfg.step / 10.0)?;
                report.refined += 1;
                if r2 < rel {
                    (numeric, rel) = (n2, r2);
                }
            }
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.name(id).to_string(), e, exact, numeric));
            }
        }
    }
    Ok(report)
}
