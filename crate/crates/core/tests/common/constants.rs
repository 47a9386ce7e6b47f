//! Published training and evaluation constants against the shipped defaults.

use wsdet::config::RunConfig;
use wsdet::metrics::CriterionKind;
use wsdet::unet::UNetConfig;

/// `name = value` lines from the defaults, in a fixed order.
pub fn default_snapshot() -> String {
    let c = RunConfig::default();
    let widths = UNetConfig::with_scale(1.0).widths();
    let mut lines = vec![
        format!("learning_rate = {}", c.sgd.learning_rate),
        format!("momentum = {}", c.sgd.momentum),
        format!("weight_decay = {}", c.sgd.weight_decay),
        format!("batch_size = {}", c.train.batch_size),
        format!("epochs = {}", c.train.epochs),
        format!("alpha_bce = {}", c.loss.alpha_bce),
        format!("alpha_dice = {}", c.loss.alpha_dice),
        format!("mixup_alpha = {}", c.mixup.alpha),
        format!("widths = {widths:?}"),
        format!("sigmoid_threshold = {}", c.postprocess.sigmoid_threshold),
        format!("iou_threshold = {}", c.eval.iou_threshold),
        format!("distance_mm = {}", c.eval.distance_mm),
    ];
    lines.push(format!(
        "criterion_is_iou = {}",
        c.eval.kind == CriterionKind::Iou
    ));
    lines.join("\n")
}

pub const PUBLISHED: &str = "\
learning_rate = 0.001
momentum = 0.9
weight_decay = 0.001
batch_size = 16
epochs = 200
alpha_bce = 0.25
alpha_dice = 1
mixup_alpha = 0.1
widths = [32, 64, 128, 256, 512]
sigmoid_threshold = 0.5
iou_threshold = 0.5
distance_mm = 2.5
criterion_is_iou = true";

/// Lines of the snapshot that differ from the published values.
pub fn mismatches() -> Vec<String> {
    default_snapshot()
        .lines()
        .zip(PUBLISHED.lines())
        .filter(|(a, b)| a != b)
        .map(|(a, b)| format!("got `{a}`, want `{b}`"))
        .collect()
}
