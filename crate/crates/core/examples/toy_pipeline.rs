//! SFT then GRPO on the toy task, printing held-out Jaccard after each stage.
//!
//! cargo run --release -p rlvr-core --example toy_pipeline

use rlvr_core::grpo::{evaluate_policy, train_grpo, GrpoConfig, RewardContext};
use rlvr_core::policy::{GenConfig, PolicyParams};
use rlvr_core::rewards::{HardRewardConfig, NuancedRewardConfig};
use rlvr_core::sft::{oracle_dataset, train_sft, SftConfig};
use rlvr_core::toyenv::gen_task;
use rlvr_core::vocab::label_stats;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let d = 16;
    let sft_data = gen_task(2000, d, 1)?.examples;
    let rl_data = gen_task(1000, d, 2)?.examples;
    let test = gen_task(500, d, 3)?.examples;
    let gen = GenConfig::default();

    let init = PolicyParams::random(d, 0.01, 0);
    println!("untrained  jaccard {:.3}", evaluate_policy(&init, &test, &gen, 9).mean_jaccard);

    let sft = train_sft(&SftConfig::default(), &oracle_dataset(&sft_data, 0), init)?;
    for e in &sft.log {
        println!("sft epoch {} train {:.4} val {:.4}", e.epoch, e.train_loss, e.val_loss);
    }
    println!("after SFT  jaccard {:.3}", evaluate_policy(&sft.params, &test, &gen, 9).mean_jaccard);

    let cfg = GrpoConfig::default();
    // Toy completions are ~25 tokens, so the length floor is scaled down.
    let hard = HardRewardConfig { min_length_tokens: 20, ..Default::default() };
    let stats = label_stats(&rl_data.iter().map(|e| e.labels).collect::<Vec<_>>())?;
    let ctx = RewardContext::new(cfg.reward, hard, NuancedRewardConfig::default(), stats);
    let out = train_grpo(sft.params, &rl_data, &cfg, ctx)?;
    for m in out.log.iter().step_by(100) {
        println!("grpo step {:3} reward {:.3} entropy {:.3} kl {:.4}", m.step, m.reward_mean, m.entropy, m.kl);
    }
    println!("after GRPO jaccard {:.3}", evaluate_policy(&out.params, &test, &gen, 9).mean_jaccard);
    Ok(())
}
