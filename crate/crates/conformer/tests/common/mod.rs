//! Shared helpers for integration tests.

use conformer::model::{conformer_forward, ModelConfig, ModelParams};
use tensorcore::{Graph, Mode, StreamRng, TokenIds};

pub fn random_tokens(cfg: &ModelConfig, b: usize, t: usize, seed: u64) -> TokenIds {
    let mut rng = StreamRng::new(seed);
    TokenIds::new(b, t, (0..b * t).map(|_| rng.below(cfg.vocab) as u32).collect()).unwrap()
}

/// Full-model gradient check in f64 against central differences.
///
/// Coordinates whose numeric estimates at `eps` and `eps/2` disagree by
/// more than 1e-6 relative are excluded as ReLU-kink coordinates (a kink
/// inside the perturbation window makes the secant O(1) wrong regardless
/// of the analytic gradient; smooth coordinates agree to O(eps^2), so a
/// genuinely wrong analytic gradient still fails on them). Coordinates
/// where both gradients are <= 1e-8 count as exact zeros.
///
/// Returns (max relative error over smooth coordinates, excluded count,
/// total count).
pub fn model_grad_check_filtered(
    cfg: &ModelConfig,
    params: &ModelParams<f64>,
    tokens: &TokenIds,
    targets: &TokenIds,
    eps: f64,
) -> (f64, usize, usize) {
    let loss_of = |p: &ModelParams<f64>| -> f64 {
        let mut g: Graph<f64> = Graph::new();
        let fwd = conformer_forward(&mut g, p, cfg, tokens, Mode::Eval, false, 0).unwrap();
        let loss = g.cross_entropy_nll(fwd.logits, targets).unwrap();
        g.value(loss).item()
    };

    // Analytic gradients in one reverse pass.
    let mut g: Graph<f64> = Graph::new();
    let fwd = conformer_forward(&mut g, params, cfg, tokens, Mode::Eval, true, 0).unwrap();
    let loss = g.cross_entropy_nll(fwd.logits, targets).unwrap();
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = fwd
        .bound
        .ordered
        .iter()
        .map(|&id| {
            g.grad_data(id)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; g.value(id).numel()])
        })
        .collect();
    drop(g);

    let mut work = params.clone();
    let shapes: Vec<usize> = work.tensors_mut().iter().map(|t| t.numel()).collect();
    let mut max_rel = 0.0f64;
    let mut excluded = 0usize;
    let mut total = 0usize;
    for (pi, &numel) in shapes.iter().enumerate() {
        for c in 0..numel {
            total += 1;
            let orig = {
                let slots = work.tensors_mut();
                slots[pi].data()[c]
            };
            let mut eval_at = |v: f64| -> f64 {
                {
                    let mut slots = work.tensors_mut();
                    slots[pi].data_mut()[c] = v;
                }
                loss_of(&work)
            };
            let f_p = eval_at(orig + eps);
            let f_m = eval_at(orig - eps);
            let f_ph = eval_at(orig + eps / 2.0);
            let f_mh = eval_at(orig - eps / 2.0);
            {
                let mut slots = work.tensors_mut();
                slots[pi].data_mut()[c] = orig;
            }
            let n_full = (f_p - f_m) / (2.0 * eps);
            let n_half = (f_ph - f_mh) / eps;
            let a = analytic[pi][c];
            if a.abs() <= 1e-8 && n_full.abs() <= 1e-8 {
                continue;
            }
            // Disagreement must clear both a relative bound and the f64
            // rounding floor of the difference quotients themselves
            // (~ulp(loss)/eps) before a coordinate counts as a kink.
            let scale = n_full.abs().max(n_half.abs()).max(1e-8);
            if (n_full - n_half).abs() > (1e-6 * scale).max(1e-10) {
                excluded += 1;
                continue;
            }
            let rel = (a - n_full).abs() / a.abs().max(n_full.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    (max_rel, excluded, total)
}
