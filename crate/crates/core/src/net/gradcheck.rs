//! Central finite-difference check of the analytic gradient.

use super::{Network, Workspace};
use crate::{Error, Result};

/// Result for one weight or bias tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub layer: usize,
    pub bias: bool,
    pub len: usize,
    /// `|ga - gn| / max(|ga|, |gn|)` over the whole tensor; zero when both
    /// gradients vanish.
    pub rel_error: f64,
    /// Same measure restricted to parameters whose `+h` and `-h` evaluations
    /// keep every max-pool argmax and ReLU sign of the unperturbed batch.
    pub smooth_rel_error: f64,
    /// Parameters whose perturbation crossed a max-pool or ReLU kink.
    pub kinks: usize,
    pub analytic_norm: f64,
}

/// Max-pool winners and ReLU signs downstream of layer `first`.
fn pattern(first: usize, ws: &Workspace, out: &mut Vec<usize>) {
    for st in ws.stages.iter().skip(first) {
        out.extend(st.argmax.iter().map(|&i| i as usize));
        out.extend(st.pooled.iter().map(|&v| usize::from(v > 0.0)));
    }
    out.extend(ws.hidden_pre.iter().map(|&v| usize::from(v > 0.0)));
}

fn rel(ga: &[f64], gn: &[f64]) -> f64 {
    let diff: Vec<f64> = ga.iter().zip(gn).map(|(a, b)| a - b).collect();
    let denom = norm(ga).max(norm(gn));
    if denom > 0.0 {
        norm(&diff) / denom
    } else {
        0.0
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Compares the analytic gradient of the batch loss
/// `sum_i |y_i - t_i|^2 / (2 n)` with central differences of step `h`,
/// tensor by tensor. Parameters are restored afterwards.
pub fn gradient_check(net: &mut Network, inputs: &[Vec<f64>], targets: &[[f64; 2]], h: f64) -> Result<Vec<TensorCheck>> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(Error::dimension(
            format!("{} targets", inputs.len()),
            format!("{} targets", targets.len()),
        ));
    }
    let scale = 1.0 / inputs.len() as f64;
    let mut workspaces = Vec::with_capacity(inputs.len());
    let mut analytic = vec![0.0; net.param_count()];
    for (x, t) in inputs.iter().zip(targets) {
        let mut ws = net.workspace();
        net.forward_f64(x, &mut ws)?;
        net.accumulate_gradient(*t, scale, &mut ws, &mut analytic);
        workspaces.push(ws);
    }

    let loss_from = |net: &Network, first: usize, wss: &mut [Workspace], pat: &mut Vec<usize>| -> f64 {
        pat.clear();
        wss.iter_mut()
            .zip(targets)
            .map(|(ws, t)| {
                let y = net.run_from(first, ws);
                pattern(first, ws, pat);
                ((y[0] - t[0]).powi(2) + (y[1] - t[1]).powi(2)) * 0.5 * scale
            })
            .sum()
    };

    let mut base = Vec::new();
    let mut pat = Vec::new();
    let mut out = Vec::new();
    for layer in 0..net.layers().len() {
        loss_from(net, layer, &mut workspaces, &mut base);
        let range = net.layer_range(layer);
        let mut numeric = vec![0.0; range.len()];
        let mut smooth = vec![true; range.len()];
        for (k, p) in range.clone().enumerate() {
            let orig = net.params()[p];
            net.params_mut()[p] = orig + h;
            let plus = loss_from(net, layer, &mut workspaces, &mut pat);
            smooth[k] = pat == base;
            net.params_mut()[p] = orig - h;
            let minus = loss_from(net, layer, &mut workspaces, &mut pat);
            smooth[k] &= pat == base;
            net.params_mut()[p] = orig;
            numeric[k] = (plus - minus) / (2.0 * h);
        }
        // restore cached activations for the unperturbed parameters
        loss_from(net, layer, &mut workspaces, &mut pat);
        let w_len = net.layers()[layer].weight_len();
        for (bias, span) in [(false, 0..w_len), (true, w_len..range.len())] {
            let ga = &analytic[range.start + span.start..range.start + span.end];
            let gn = &numeric[span.clone()];
            let keep = &smooth[span.clone()];
            let pick = |g: &[f64]| -> Vec<f64> { g.iter().zip(keep).filter(|(_, &k)| k).map(|(v, _)| *v).collect() };
            out.push(TensorCheck {
                layer,
                bias,
                len: span.len(),
                rel_error: rel(ga, gn),
                smooth_rel_error: rel(&pick(ga), &pick(gn)),
                kinks: keep.iter().filter(|&&k| !k).count(),
                analytic_norm: norm(ga),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetworkSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn small_network_passes() {
        let spec = NetworkSpec {
            input: (3, 16, 16),
            conv_channels: vec![2, 3, 4],
            pools: vec![2, 2, 2],
            hidden: 5,
            outputs: 2,
        };
        let mut net = Network::new(spec.clone(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..spec.input_len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let targets = [[1.0, -2.0], [0.5, 0.5], [-3.0, 1.0]];
        let before = net.params().to_vec();
        let checks = gradient_check(&mut net, &inputs, &targets, 1e-5).unwrap();
        assert_eq!(checks.len(), 10);
        for c in &checks {
            assert!(c.rel_error < 1e-5, "{c:?}");
        }
        assert_eq!(net.params(), &before[..]);
    }
}
