//! Synthetic multi-domain classification and the leave-one-domain
//! comparison of a plain CNN against the same CNN behind an InvNorm block.

mod classifier;
mod dataset;
mod domain;
mod render;
mod report;
mod train;

pub use classifier::{load_classifier, save_classifier, SmallCnn, CLASSIFIER_WIDTHS};
pub use dataset::{
    export_dataset, generate_dataset, import_dataset, DomainDataset, MANIFEST, META,
};
pub use domain::{default_domains, DomainSpec};
pub use render::{render, MIN_HW, SHAPES};
pub use report::{accuracy_svg, comparison_csv, comparison_table};
pub use train::{
    evaluate, feature_style_gap, macro_f1, run_leave_one_domain, style_gap, train, train_variant,
    EvalReport, HyperParams, RunSummary, TrainedModel, Variant,
};

/// SplitMix64 finalizer over `a ^ b`; derives independent stream seeds.
pub(crate) fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(0x6a09_e667_f3bc_c909);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Clamp to `[0, 1]` and round to the 8-bit grid.
pub(crate) fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}
