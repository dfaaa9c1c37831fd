//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::counters::CountingModel;
use crate::error::{Error, Result};

/// Anything that owns a [`ParamStore`].
pub trait HasParams {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
}

impl HasParams for ParamStore {
    fn params(&self) -> &ParamStore {
        self
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        self
    }
}

impl HasParams for CountingModel {
    fn params(&self) -> &ParamStore {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates below this magnitude are compared on an absolute scale.
    pub floor: f64,
    /// Coordinates checked per parameter tensor; larger tensors are subsampled.
    pub max_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            floor: 1e-6,
            max_per_param: 48,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(parameter name, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of `loss` with central differences on every
/// trainable parameter. `loss` must be deterministic for fixed parameters.
pub fn check_gradients<T, F>(target: &mut T, opts: GradCheckOptions, loss: F) -> Result<GradCheckReport>
where
    T: HasParams,
    F: Fn(&T, &mut Graph) -> Result<Var>,
{
    let eval = |t: &T| -> Result<f64> {
        let mut g = Graph::new(t.params());
        let l = loss(t, &mut g)?;
        Ok(g.scalar(l))
    };
    let grads = {
        let mut g = Graph::new(target.params());
        let l = loss(target, &mut g)?;
        g.backward(l)?
    };
    let ids: Vec<(ParamId, usize, String)> = target
        .params()
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, p)| (id, p.value.len(), p.name.clone()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for (id, len, name) in ids {
        let coords: Vec<usize> = if len <= opts.max_per_param {
            (0..len).collect()
        } else {
            let mut c = sample(&mut rng, len, opts.max_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            let orig = target.params().value(id).data()[i];
            target.params_mut().value_mut(id).data_mut()[i] = orig + opts.step;
            let up = eval(target);
            target.params_mut().value_mut(id).data_mut()[i] = orig - opts.step;
            let down = eval(target);
            target.params_mut().value_mut(id).data_mut()[i] = orig;
            let numeric = (up? - down?) / (2.0 * opts.step);
            if !numeric.is_finite() {
                return Err(Error::NonFinite(format!("finite difference of {name}[{i}]")));
            }
            let err = relative_error(analytic, numeric, opts.floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i, analytic, numeric));
            }
        }
    }
    Ok(report)
}
