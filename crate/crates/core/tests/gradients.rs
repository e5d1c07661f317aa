mod common;

const TOL: f64 = 1e-4;

fn run(name: &str) {
    let (_, case) = common::GRADIENT_CASES.iter().find(|(n, _)| *n == name).expect("case");
    for seed in 100..105 {
        let e = case(seed);
        assert!(e < TOL, "{name} seed {seed}: {e:.3e}");
    }
}

#[test]
fn every_case_is_listed_once() {
    let mut names: Vec<&str> = common::GRADIENT_CASES.iter().map(|c| c.0).collect();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), common::GRADIENT_CASES.len());
}

#[test]
fn gat_layer() {
    run("GATv2 layer");
}

#[test]
fn rmsnorm() {
    run("RMSNorm");
}

#[test]
fn selective_scan() {
    run("selective scan");
}

#[test]
fn window_attention() {
    run("window attention");
}

#[test]
fn gated_fusion() {
    run("gated fusion");
}

#[test]
fn moe_with_load_balance() {
    run("MoE + load balance");
}

#[test]
fn gru() {
    run("GRU layer");
}

#[test]
fn squeeze_excitation() {
    run("SE block");
}

#[test]
fn lora_head() {
    run("LoRA head");
}

#[test]
fn feature_loss() {
    run("feature loss");
}

#[test]
fn attention_loss() {
    run("attention loss");
}

#[test]
fn contrastive_loss() {
    run("contrastive loss");
}

#[test]
fn ppo_objective() {
    run("PPO objective");
}
