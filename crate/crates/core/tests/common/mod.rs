#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use timemark::clock::make_duration_prompt;
use timemark::grpo::{GroupBatch, GrpoConfig, Rollout};
use timemark::policy::{Params, PolicyConfig, PromptContext, ToyPolicy};
use timemark::vocab::{VocabConfig, Vocabulary};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Instances whose ratios land this close to a clip boundary are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;

pub fn small_policy(rng: &mut ChaCha8Rng) -> ToyPolicy {
    let vocab = Vocabulary::new(VocabConfig {
        words: 4,
        punct_every: 2,
        marker_quantum_s: 0.5,
        t_max_s: 3.0,
        bucket_max_s: 4,
    })
    .unwrap();
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
    policy
}

fn duration_prompt(policy: &ToyPolicy, rng: &mut ChaCha8Rng) -> PromptContext {
    make_duration_prompt(policy.vocab(), rng.gen_range(0.6..4.4)).unwrap()
}

/// A loss over the policy parameters with its analytic gradient.
pub struct Instance {
    pub loss: Box<dyn Fn(&ToyPolicy) -> f64>,
    pub grad: Vec<f64>,
}

/// Relative error of the analytic gradient against central differences,
/// measured over the whole parameter vector.
pub fn fd_relative_error(policy: &ToyPolicy, inst: &Instance) -> f64 {
    let mut probe = policy.clone();
    let n = policy.params.len();
    let mut fd = vec![0.0; n];
    for (i, slot) in fd.iter_mut().enumerate() {
        let x = *param_mut(&mut probe.params, i);
        *param_mut(&mut probe.params, i) = x + FD_STEP;
        let up = (inst.loss)(&probe);
        *param_mut(&mut probe.params, i) = x - FD_STEP;
        let down = (inst.loss)(&probe);
        *param_mut(&mut probe.params, i) = x;
        *slot = (up - down) / (2.0 * FD_STEP);
    }
    let diff: f64 = inst
        .grad
        .iter()
        .zip(&fd)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = norm(&inst.grad).max(norm(&fd)).max(1e-12);
    diff / scale
}

fn param_mut(params: &mut Params, mut i: usize) -> &mut f64 {
    for table in [&mut params.base, &mut params.inc, &mut params.ctrl] {
        if i < table.len() {
            return &mut table[i];
        }
        i -= table.len();
    }
    panic!("parameter index out of range")
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn sft_instance(policy: &ToyPolicy, rng: &mut ChaCha8Rng) -> Instance {
    let mut batch = Vec::new();
    for _ in 0..rng.gen_range(1..=3) {
        let prompt = if rng.gen_bool(0.5) {
            PromptContext::free()
        } else {
            duration_prompt(policy, rng)
        };
        let sample = policy.sample_sequence(&prompt, 10, rng.gen());
        batch.push((prompt, sample.tokens));
    }
    let (_, grad) = policy.sft_loss_and_grad(&batch).unwrap();
    Instance {
        grad: grad.iter().copied().collect(),
        loss: Box::new(move |p: &ToyPolicy| p.sft_loss(&batch).unwrap()),
    }
}

/// Mixed objective `(1 - alpha) * mean_groups(L_grpo) + alpha * L_sft` over
/// two prompt groups, or `None` when some ratio sits near a clip kink.
pub fn mixed_instance(policy: &ToyPolicy, rng: &mut ChaCha8Rng) -> Option<Instance> {
    let cfg = GrpoConfig {
        kl_beta: rng.gen_range(0.0..0.5),
        ..GrpoConfig::default()
    };
    let alpha = rng.gen_range(0.0..1.0);
    let mut reference = policy.clone();
    for p in reference.params.iter_mut() {
        *p += rng.gen_range(-0.3..0.3);
    }
    let mut groups = Vec::new();
    for gi in 0..2 {
        let prompt = duration_prompt(policy, rng);
        let mut rollouts = Vec::new();
        for _ in 0..cfg.group_size {
            let sample = policy.sample_sequence(&prompt, 8, rng.gen());
            let logp_ref = reference.sequence_logprob(&prompt, &sample.tokens).unwrap().1;
            // The old snapshot differs a little so that both clip branches occur.
            let logp_old: Vec<f64> = sample
                .logps
                .iter()
                .map(|lp| (lp + rng.gen_range(-0.35..0.35)).min(0.0))
                .collect();
            for (lp, old) in sample.logps.iter().zip(&logp_old) {
                let ratio = (lp - old).exp();
                if (ratio - (1.0 - cfg.clip_eps)).abs() < KINK_MARGIN
                    || (ratio - (1.0 + cfg.clip_eps)).abs() < KINK_MARGIN
                {
                    return None;
                }
            }
            rollouts.push(Rollout {
                prompt_id: format!("p{gi}"),
                tokens: sample.tokens,
                logp_theta: sample.logps,
                logp_old,
                logp_ref,
                reward: rng.gen_range(-2.0..3.0),
                truncated: sample.truncated,
            });
        }
        groups.push((prompt, GroupBatch::new(rollouts).unwrap()));
    }
    let sft = sft_instance(policy, rng);

    let n_groups = groups.len() as f64;
    let mut grad: Vec<f64> = sft.grad.iter().map(|g| alpha * g).collect();
    for (prompt, batch) in &groups {
        let (_, g) = policy.grpo_grad(prompt, batch, &cfg).unwrap();
        for (acc, x) in grad.iter_mut().zip(g.iter()) {
            *acc += (1.0 - alpha) / n_groups * x;
        }
    }
    let sft_loss = sft.loss;
    let loss = move |p: &ToyPolicy| {
        let grpo: f64 = groups
            .iter()
            .map(|(prompt, batch)| p.grpo_grad(prompt, batch, &cfg).unwrap().0.loss)
            .sum();
        timemark::grpo::mixed_loss(grpo / n_groups, sft_loss(p), alpha)
    };
    Some(Instance {
        loss: Box::new(loss),
        grad,
    })
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
