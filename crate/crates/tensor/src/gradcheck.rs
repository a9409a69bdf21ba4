//! Central finite-difference gradient checks in f64.

use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::rng::Stream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor for the relative error; gradients smaller than this in
/// magnitude are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// How many times a probe step is divided by ten when `x ± h` fall on
/// different pieces of a piecewise function.
pub const MAX_SHRINK: u32 = 3;

#[derive(Clone, Debug)]
pub struct Probe {
    pub tensor: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Step actually used.
    pub step: f64,
    /// `x + step` and `x - step` still straddle a kink.
    pub straddles: bool,
}

impl Probe {
    pub fn rel_err(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(REL_FLOOR)
    }
}

pub fn max_rel_err(probes: &[Probe]) -> f64 {
    probes.iter().map(Probe::rel_err).fold(0.0, f64::max)
}

fn pick(stream: &mut Stream, sizes: &[usize]) -> (usize, usize) {
    let total: usize = sizes.iter().sum();
    let mut r = stream.below(total);
    for (t, &n) in sizes.iter().enumerate() {
        if r < n {
            return (t, r);
        }
        r -= n;
    }
    unreachable!()
}

/// Central difference of `eval` around `x0`, shrinking the step while the
/// two evaluations report different branch signatures.
fn central(x0: f64, h: f64, mut eval: impl FnMut(f64) -> Result<(f64, u64)>) -> Result<(f64, f64, bool)> {
    let mut step = h;
    let mut shrinks = 0;
    loop {
        let (fp, sp) = eval(x0 + step)?;
        let (fm, sm) = eval(x0 - step)?;
        let straddles = sp != sm;
        if !straddles || shrinks == MAX_SHRINK {
            return Ok(((fp - fm) / (2.0 * step), step, straddles));
        }
        step /= 10.0;
        shrinks += 1;
    }
}

/// Probes `f` with respect to its input tensors.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F, probes: usize, h: f64, stream: &mut Stream) -> Result<Vec<Probe>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape.value(out).item(), tape.branch_signature()))
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let sizes: Vec<usize> = inputs.iter().map(Tensor::numel).collect();
    let mut result = Vec::with_capacity(probes);
    for _ in 0..probes {
        let (t, e) = pick(stream, &sizes);
        let analytic = grads.get(vars[t]).map_or(0.0, |g| g.data()[e]);
        let mut vals = inputs.to_vec();
        let x0 = vals[t].data()[e];
        let (numeric, step, straddles) = central(x0, h, |x| {
            vals[t].data_mut()[e] = x;
            eval(&vals)
        })?;
        result.push(Probe { tensor: t, element: e, analytic, numeric, step, straddles });
    }
    Ok(result)
}

/// Probes `f` with respect to the trainable parameters of `store`. The tape
/// passed to `f` is an inference tape so batchnorm buffers stay fixed.
pub fn check_params<F>(store: &mut ParamStore<f64>, f: F, probes: usize, h: f64, stream: &mut Stream) -> Result<Vec<Probe>>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out)?;
    drop(tape);
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let sizes: Vec<usize> = ids.iter().map(|&id| store.value(id).numel()).collect();
    let mut result = Vec::with_capacity(probes);
    for _ in 0..probes {
        let (t, e) = pick(stream, &sizes);
        let id = ids[t];
        let analytic = grads.param(id).map_or(0.0, |g| g.data()[e]);
        let x0 = store.value(id).data()[e];
        let eval = |x: f64| -> Result<(f64, u64)> {
            store.get_mut(id).value.data_mut()[e] = x;
            let mut tape = Tape::new();
            let out = f(&mut tape, store)?;
            Ok((tape.value(out).item(), tape.branch_signature()))
        };
        let probe = central(x0, h, eval);
        store.get_mut(id).value.data_mut()[e] = x0;
        let (numeric, step, straddles) = probe?;
        result.push(Probe { tensor: t, element: e, analytic, numeric, step, straddles });
    }
    Ok(result)
}
