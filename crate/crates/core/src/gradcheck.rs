//! Central finite-difference checks for tape gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::nn::{Ctx, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `‖g_tape − g_fd‖ / max(‖g_tape‖, ‖g_fd‖, floor)` over the probed coordinates.
    pub rel_err: f64,
    pub coords: usize,
}

/// Compares tape gradients of a scalar function with central differences.
///
/// `max_coords` bounds the number of probed coordinates per input; larger
/// inputs are sampled at random.
pub fn gradcheck<F, R>(inputs: &[Tensor], max_coords: usize, rng: &mut R, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    R: Rng + ?Sized,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nf = 0.0;
    let mut coords = 0;
    let mut xs = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        let picks: Vec<usize> =
            if t.len() <= max_coords { (0..t.len()).collect() } else { sample(rng, t.len(), max_coords).into_vec() };
        for j in picks {
            let x0 = t.data()[j];
            let h = 1e-6 * x0.abs().max(1.0);
            xs[i].data_mut()[j] = x0 + h;
            let fp = eval(&xs)?;
            xs[i].data_mut()[j] = x0 - h;
            let fm = eval(&xs)?;
            xs[i].data_mut()[j] = x0;
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic[i].data()[j];
            diff += (a - fd) * (a - fd);
            na += a * a;
            nf += fd * fd;
            coords += 1;
        }
    }
    let denom = na.sqrt().max(nf.sqrt()).max(1e-7);
    Ok(GradCheckReport { rel_err: diff.sqrt() / denom, coords })
}

/// [`gradcheck`] over every parameter of `store` followed by `extra` inputs.
pub fn gradcheck_params<F, R>(
    store: &ParamStore,
    extra: &[Tensor],
    max_coords: usize,
    rng: &mut R,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&Ctx<'t>, &[Var<'t>]) -> Result<Var<'t>>,
    R: Rng + ?Sized,
{
    let mut inputs = store.tensors();
    let np = inputs.len();
    inputs.extend_from_slice(extra);
    gradcheck(&inputs, max_coords, rng, |tape, vars| {
        let ctx = Ctx::from_vars(tape, vars[..np].to_vec(), store);
        f(&ctx, &vars[np..])
    })
}
