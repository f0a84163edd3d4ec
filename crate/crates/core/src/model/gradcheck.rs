use super::{ParamId, ToyVlm};
use crate::autodiff::gradcheck::{relative_error, sample_coordinates};
use crate::autodiff::{GradCheck, Tape, Var};
use crate::error::{Error, Result};

/// Compares tape gradients of `loss` against central differences for the
/// parameters `ids`, returning the worst relative error over the sampled
/// coordinates. The parameters must already be trainable.
pub fn check_param_grads<F>(
    model: &mut ToyVlm,
    ids: &[ParamId],
    loss: F,
    cfg: GradCheck,
) -> Result<f64>
where
    F: Fn(&ToyVlm, &mut Tape) -> Result<Var>,
{
    if let Some(&id) = ids
        .iter()
        .find(|&&id| !model.params.tensor(id).requires_grad())
    {
        return Err(Error::Contract(format!(
            "parameter `{}` is frozen",
            model.params.get(id).name
        )));
    }
    let mut tape = Tape::new();
    let out = loss(model, &mut tape)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            let v = model.bind(&mut tape, id);
            grads
                .get(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; model.params.tensor(id).numel()])
        })
        .collect();

    let eval = |m: &ToyVlm| -> Result<f64> {
        let mut tape = Tape::new();
        let out = loss(m, &mut tape)?;
        Ok(tape.item(out))
    };
    let mut worst: f64 = 0.0;
    for (n, (&id, g)) in ids.iter().zip(&analytic).enumerate() {
        let coords = sample_coordinates(g.len(), cfg.samples, cfg.seed.wrapping_add(n as u64));
        for i in coords {
            let orig = model.params.tensor(id).data()[i];
            model.params.tensor_mut(id).data_mut()[i] = orig + cfg.step;
            let plus = eval(model)?;
            model.params.tensor_mut(id).data_mut()[i] = orig - cfg.step;
            let minus = eval(model)?;
            model.params.tensor_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            worst = worst.max(relative_error(g[i], numeric));
        }
    }
    Ok(worst)
}
