//! Central finite-difference oracle for tape gradients.

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    pub step: f64,
    /// Lower bound on the denominator of the relative error. Central
    /// differences at step 1e-5 resolve gradients only to about 1e-11·|f|,
    /// so smaller entries carry no relative information.
    pub abs_floor: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            step: 1e-5,
            abs_floor: 1e-6,
        }
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(abs_floor)
}

/// Worst relative error between reverse-mode and central-difference
/// gradients of `f` with respect to every element of every input.
pub fn check_input_gradients<F>(inputs: &[Tensor], opts: FdOptions, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let root = f(&mut tape, &vars)?;
        Ok(tape.value(root).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v);
        for j in 0..xs[k].len() {
            let orig = xs[k].data()[j];
            xs[k].data_mut()[j] = orig + opts.step;
            let up = eval(&xs)?;
            xs[k].data_mut()[j] = orig - opts.step;
            let down = eval(&xs)?;
            xs[k].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            worst = worst.max(relative_error(analytic.data()[j], numeric, opts.abs_floor));
        }
    }
    Ok(worst)
}

/// Worst relative error over the given `(parameter, element)` coordinates,
/// or over every trainable element when `coords` is `None`.
pub fn check_param_gradients<F>(
    store: &ParamStore,
    coords: Option<&[(String, usize)]>,
    opts: FdOptions,
    f: F,
) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let root = f(&mut tape, store)?;
    let grads = tape.backward(root)?;

    let all: Vec<(String, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = store
                .iter()
                .filter(|p| p.trainable)
                .flat_map(|p| (0..p.tensor.len()).map(move |j| (p.name.clone(), j)))
                .collect();
            &all
        }
    };

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let root = f(&mut tape, s)?;
        Ok(tape.value(root).item())
    };

    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for (name, j) in coords {
        let analytic = grads
            .param(name)
            .map(|g| g.data()[*j])
            .unwrap_or(0.0);
        let orig = store.expect(name).tensor.data()[*j];
        let slot = |s: &mut ParamStore, v: f64| {
            s.get_mut(name).expect("parameter").tensor.data_mut()[*j] = v;
        };
        slot(&mut probe, orig + opts.step);
        let up = eval(&probe)?;
        slot(&mut probe, orig - opts.step);
        let down = eval(&probe)?;
        slot(&mut probe, orig);
        let numeric = (up - down) / (2.0 * opts.step);
        worst = worst.max(relative_error(analytic, numeric, opts.abs_floor));
    }
    Ok(worst)
}
