//! Central-difference gradient checks for every differentiable block, 20 seeds each.

#[path = "support/blocks.rs"]
mod blocks;

const SEEDS: u64 = 20;
const TOL: f64 = 1e-4;

fn check(block: &str, f: blocks::Check) {
    for seed in 0..SEEDS {
        let r = f(seed).unwrap();
        assert!(
            r.max_rel_error <= TOL,
            "{block} seed {seed}: max relative error {:.3e} at `{}`",
            r.max_rel_error,
            r.worst
        );
    }
}

#[test]
fn layer_norm_block() {
    check("layer norm", blocks::layer_norm);
}

#[test]
fn attention_block() {
    check("attention", blocks::attention);
}

#[test]
fn tokenizer_and_language_encoder() {
    check("tokenizer", blocks::tokenizer);
}

#[test]
fn vision_encoder_block() {
    check("vision encoder", blocks::vision_encoder);
}

#[test]
fn selection_block() {
    check("selection", blocks::selection);
}

#[test]
fn fusion_and_head() {
    check("fusion + head", blocks::fusion_head);
}

#[test]
fn info_nce_and_align_loss() {
    check("contrastive", blocks::contrastive);
}

#[test]
fn total_loss_through_full_model() {
    check("total loss", blocks::total_loss);
}

#[test]
fn block_table_is_complete() {
    assert_eq!(blocks::BLOCKS.len(), 8);
}
