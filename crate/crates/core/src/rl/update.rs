use crate::error::{Error, Result};
use crate::nn::{entropy, entropy_grad, log_prob_grad, masked_softmax, Adam, ForwardCache, Gradients, Network};

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PolicyStats {
    /// Mean of `−A·ln π(a|s)` over the batch.
    pub loss: f64,
    /// Mean entropy of the masked policy.
    pub entropy: f64,
    /// False when the step was skipped for a non-finite gradient.
    pub applied: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ValueStats {
    /// Mean of `½ (V(s) − y)²` before the step.
    pub loss: f64,
    pub applied: bool,
}

/// Truncated importance weights `min(π(a|s)/μ(a|s), clip)` for replayed
/// samples taken under the behavior policy `μ`.
#[derive(Debug, Clone, Copy)]
pub struct Importance<'a> {
    pub behavior: &'a [f64],
    pub clip: f64,
}

/// One Adam step on `Σ_b [−ρ_b A_b ∇ln π(a_b|s_b) − β ∇H(π(·|s_b))]`, with `π`
/// the masked, renormalized policy and `ρ_b` the importance weight (1
/// without `importance`).
#[allow(clippy::too_many_arguments)]
pub fn policy_gradient_update(
    net: &mut Network<f64>,
    opt: &mut Adam<f64>,
    states: &[f64],
    masks: &[&[bool]],
    actions: &[usize],
    advantages: &[f64],
    beta: f64,
    importance: Option<Importance<'_>>,
    cache: &mut ForwardCache<f64>,
) -> Result<PolicyStats> {
    let batch = actions.len();
    if batch == 0 {
        return Ok(PolicyStats::default());
    }
    if masks.len() != batch || advantages.len() != batch || importance.is_some_and(|w| w.behavior.len() != batch) {
        return Err(Error::Shape("policy batch fields differ in length".into()));
    }
    let k = net.output_dim();
    let out = match net.forward_batch(states, batch, cache) {
        Ok(o) => o,
        Err(Error::Numerical { .. }) => return Ok(PolicyStats::default()),
        Err(e) => return Err(e),
    };
    let mut d = vec![0.0; batch * k];
    let mut loss = 0.0;
    let mut ent = 0.0;
    let mut lp = vec![0.0; k];
    let mut eg = vec![0.0; k];
    for b in 0..batch {
        let p = masked_softmax(&out[b * k..(b + 1) * k], masks[b]).ok_or(Error::NonFiniteProbabilities)?;
        let a = actions[b];
        let rho = importance.map_or(1.0, |w| (p[a] / w.behavior[b].max(f64::MIN_POSITIVE)).min(w.clip));
        let adv = rho * advantages[b];
        loss -= adv * p[a].max(1e-12).ln();
        ent += entropy(&p);
        log_prob_grad(&p, a, &mut lp);
        entropy_grad(&p, &mut eg);
        for j in 0..k {
            d[b * k + j] = -adv * lp[j] - beta * eg[j];
        }
    }
    let mut grads = Gradients::zeros_like(net);
    match net.backward_batch(cache, &d, &mut grads) {
        Ok(()) => {}
        Err(Error::Numerical { .. }) => return Ok(PolicyStats { loss: f64::NAN, entropy: f64::NAN, applied: false }),
        Err(e) => return Err(e),
    }
    let applied = opt.step(net, &grads);
    Ok(PolicyStats { loss: loss / batch as f64, entropy: ent / batch as f64, applied })
}

/// One Adam step on the mean squared error `½ (V(s) − y)²`.
pub fn value_update(
    net: &mut Network<f64>,
    opt: &mut Adam<f64>,
    states: &[f64],
    targets: &[f64],
    cache: &mut ForwardCache<f64>,
) -> Result<ValueStats> {
    let batch = targets.len();
    if batch == 0 {
        return Ok(ValueStats::default());
    }
    let out = match net.forward_batch(states, batch, cache) {
        Ok(o) => o,
        Err(Error::Numerical { .. }) => return Ok(ValueStats::default()),
        Err(e) => return Err(e),
    };
    let n = batch as f64;
    let d: Vec<f64> = out.iter().zip(targets).map(|(v, y)| (v - y) / n).collect();
    let loss = out.iter().zip(targets).map(|(v, y)| 0.5 * (v - y).powi(2)).sum::<f64>() / n;
    let mut grads = Gradients::zeros_like(net);
    match net.backward_batch(cache, &d, &mut grads) {
        Ok(()) => {}
        Err(Error::Numerical { .. }) => return Ok(ValueStats { loss, applied: false }),
        Err(e) => return Err(e),
    }
    let applied = opt.step(net, &grads);
    Ok(ValueStats { loss, applied })
}
