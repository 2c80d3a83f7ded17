//! Compare the analytic SFT and GRPO gradients of a small random policy with
//! central finite differences.
//!
//! ```text
//! cargo run --release --example gradient_check
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use timemark::clock::make_duration_prompt;
use timemark::grpo::{GroupBatch, GrpoConfig, Rollout};
use timemark::policy::{Params, PolicyConfig, PromptContext, ToyPolicy};
use timemark::vocab::{VocabConfig, Vocabulary};

const H: f64 = 1e-5;

fn param(params: &mut Params, mut i: usize) -> &mut f64 {
    for table in [&mut params.base, &mut params.inc, &mut params.ctrl] {
        if i < table.len() {
            return &mut table[i];
        }
        i -= table.len();
    }
    panic!("parameter index out of range")
}

fn finite_difference(policy: &ToyPolicy, loss: impl Fn(&ToyPolicy) -> f64) -> Vec<f64> {
    let mut probe = policy.clone();
    (0..policy.n_params())
        .map(|i| {
            let x = *param(&mut probe.params, i);
            *param(&mut probe.params, i) = x + H;
            let up = loss(&probe);
            *param(&mut probe.params, i) = x - H;
            let down = loss(&probe);
            *param(&mut probe.params, i) = x;
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn relative_error(analytic: &Params, numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.norm().max(numeric.iter().map(|x| x * x).sum::<f64>().sqrt());
    diff / scale.max(1e-12)
}

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let vocab = Vocabulary::new(VocabConfig {
        words: 4,
        punct_every: 2,
        marker_quantum_s: 0.5,
        t_max_s: 3.0,
        bucket_max_s: 4,
    })?;
    let cfg = PolicyConfig {
        inc_span: 3,
        inc_max_offset: 4,
        ctrl_radius: 2,
        ctrl_span: 2,
        ..PolicyConfig::default()
    };
    let mut policy = ToyPolicy::uniform(vocab, cfg);
    for p in policy.params.iter_mut() {
        *p = rng.gen_range(-1.0..1.0);
    }
    println!("{} parameters", policy.n_params());

    let prompt = make_duration_prompt(policy.vocab(), 2.5)?;
    let batch: Vec<(PromptContext, Vec<u32>)> = (0..3)
        .map(|i| (prompt.clone(), policy.sample_sequence(&prompt, 10, i).tokens))
        .collect();
    let (_, grad) = policy.sft_loss_and_grad(&batch)?;
    let fd = finite_difference(&policy, |p| p.sft_loss(&batch).unwrap());
    println!("SFT  relative error {:.2e}", relative_error(&grad, &fd));

    let grpo = GrpoConfig {
        kl_beta: 0.1,
        ..GrpoConfig::default()
    };
    let rollouts = (0..grpo.group_size as u64)
        .map(|g| {
            let s = policy.sample_sequence(&prompt, 8, 100 + g);
            Rollout {
                prompt_id: "p".into(),
                logp_old: s
                    .logps
                    .iter()
                    .map(|lp| (lp + 0.1 * (g as f64 - 1.5)).min(0.0))
                    .collect(),
                logp_ref: s.logps.iter().map(|lp| lp - 0.05).collect(),
                logp_theta: s.logps,
                tokens: s.tokens,
                reward: g as f64,
                truncated: s.truncated,
            }
        })
        .collect();
    let group = GroupBatch::new(rollouts)?;
    let (loss, grad) = policy.grpo_grad(&prompt, &group, &grpo)?;
    let fd = finite_difference(&policy, |p| p.grpo_grad(&prompt, &group, &grpo).unwrap().0.loss);
    println!(
        "GRPO relative error {:.2e} (loss {:.4}, clipped fraction {:.2})",
        relative_error(&grad, &fd),
        loss.loss,
        loss.clipped_fraction
    );
    Ok(())
}
