//! Central finite-difference checks of analytic gradients.

use alloc::vec::Vec;

use super::{ParamStore, Real, Result, Tape, Tensor, Var};

/// Magnitude below which gradient errors are measured in absolute rather
/// than relative terms; with `h = 1e-5` in f64 the finite-difference noise
/// sits around 1e-10, so this keeps near-zero coordinates meaningful.
pub const DEFAULT_GRAD_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// `(input or parameter index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }

    fn record(&mut self, analytic: f64, numeric: f64, floor: f64, at: (usize, usize)) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(floor);
        self.checked += 1;
        self.max_abs_error = self.max_abs_error.max(abs);
        if rel > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = Some(at);
        }
    }
}

/// Checks `f` differentiated with respect to each of `inputs`.
pub fn grad_check<S, F>(inputs: &[Tensor<S>], f: F, h: f64, floor: f64) -> Result<GradCheckReport>
where
    S: Real,
    F: Fn(&mut Tape<'_, S>, &[Var]) -> Result<Var>,
{
    let store = ParamStore::new();
    let eval = |xs: &[Tensor<S>]| -> Result<f64> {
        let mut tape = Tape::new(&store);
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item().as_f64())
    };

    let mut tape = Tape::new(&store);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<S>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        for j in 0..inputs[i].numel() {
            let analytic = grads.of(*var).map_or(0.0, |g| g.data()[j].as_f64());
            let x0 = work[i].data()[j];
            work[i].data_mut()[j] = S::from_f64(x0.as_f64() + h);
            let up = eval(&work)?;
            work[i].data_mut()[j] = S::from_f64(x0.as_f64() - h);
            let down = eval(&work)?;
            work[i].data_mut()[j] = x0;
            report.record(analytic, (up - down) / (2.0 * h), floor, (i, j));
        }
    }
    Ok(report)
}

/// Checks a scalar function of every parameter in `store`. At most
/// `max_coords` evenly spaced coordinates per parameter are probed.
pub fn grad_check_params<S, F>(
    store: &ParamStore<S>,
    f: F,
    h: f64,
    floor: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport>
where
    S: Real,
    F: Fn(&mut Tape<'_, S>) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        tape.backward(loss)?
    };
    let eval = |s: &ParamStore<S>| -> Result<f64> {
        let mut tape = Tape::new(s);
        let out = f(&mut tape)?;
        Ok(tape.value(out).item().as_f64())
    };

    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let n = store.get(id).numel();
        let step = max_coords.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        for j in (0..n).step_by(step) {
            let analytic = grads.param(id).map_or(0.0, |g| g.data()[j].as_f64());
            let x0 = work.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = S::from_f64(x0.as_f64() + h);
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[j] = S::from_f64(x0.as_f64() - h);
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[j] = x0;
            report.record(analytic, (up - down) / (2.0 * h), floor, (id.0, j));
        }
    }
    Ok(report)
}
