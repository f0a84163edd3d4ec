//! Published numbers kept as reference data.

use serde::Serialize;

/// One row of the published bias comparison.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BiasTableRow {
    pub model: &'static str,
    pub size: &'static str,
    /// `None` for general-purpose baselines.
    pub adapter: Option<&'static str>,
    pub dpo: bool,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub bertscore: f64,
    pub overall: f64,
}

const fn base(
    model: &'static str,
    size: &'static str,
    p: f64,
    r: f64,
    f1: f64,
    bs: f64,
    o: f64,
) -> BiasTableRow {
    BiasTableRow {
        model,
        size,
        adapter: None,
        dpo: false,
        precision: p,
        recall: r,
        f1,
        bertscore: bs,
        overall: o,
    }
}

#[allow(clippy::too_many_arguments)]
const fn ours(
    size: &'static str,
    adapter: &'static str,
    dpo: bool,
    p: f64,
    r: f64,
    f1: f64,
    bs: f64,
    o: f64,
) -> BiasTableRow {
    BiasTableRow {
        model: "ours",
        size,
        adapter: Some(adapter),
        dpo,
        precision: p,
        recall: r,
        f1,
        bertscore: bs,
        overall: o,
    }
}

/// Bias benchmark results: precision, recall, F1, BERTScore and Overall.
pub const BIAS_BENCHMARK: [BiasTableRow; 12] = [
    base("LLaMA-3.2", "11B", 0.143, 0.524, 0.209, 0.582, 0.121),
    base("Pixtral", "12B", 0.124, 0.663, 0.198, 0.674, 0.133),
    base("LLaVA v1.6", "7B", 0.116, 0.650, 0.192, 0.681, 0.131),
    base("LLaVA v1.5", "7B", 0.150, 0.639, 0.236, 0.663, 0.157),
    ours("3B", "LoRA", false, 0.336, 0.453, 0.369, 0.640, 0.236),
    ours("3B", "MoLE", false, 0.284, 0.408, 0.298, 0.632, 0.188),
    ours("3B", "LoRA", true, 0.348, 0.454, 0.384, 0.706, 0.271),
    ours("3B", "MoLE", true, 0.220, 0.332, 0.239, 0.497, 0.119),
    ours("10B", "LoRA", false, 0.332, 0.487, 0.382, 0.701, 0.268),
    ours("10B", "MoLE", false, 0.271, 0.433, 0.296, 0.616, 0.183),
    ours("10B", "LoRA", true, 0.386, 0.412, 0.379, 0.716, 0.271),
    ours("10B", "MoLE", true, 0.296, 0.418, 0.326, 0.676, 0.220),
];

/// Average prompt lengths assumed by the published FLOPs comparison.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PromptTokens {
    pub question: f64,
    pub instruction: f64,
    pub combined: f64,
}

pub const PUBLISHED_TOKENS: PromptTokens = PromptTokens {
    question: 50.0,
    instruction: 100.0,
    combined: 150.0,
};

/// A published FLOPs reduction factor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FlopsReference {
    pub ours: &'static str,
    pub ours_params: f64,
    pub baseline: &'static str,
    pub baseline_params: f64,
    pub factor: f64,
}

const fn flops(
    ours: &'static str,
    ours_params: f64,
    baseline: &'static str,
    baseline_params: f64,
    factor: f64,
) -> FlopsReference {
    FlopsReference {
        ours,
        ours_params,
        baseline,
        baseline_params,
        factor,
    }
}

pub const FLOPS_REDUCTIONS: [FlopsReference; 8] = [
    flops("3B", 3e9, "LLaMA 3.2 11B", 11e9, 22.5),
    flops("3B", 3e9, "Pixtral 12B", 12e9, 30.0),
    flops("3B", 3e9, "LLaVA v1.6 7B", 7e9, 17.5),
    flops("3B", 3e9, "LLaVA v1.5 7B", 7e9, 17.5),
    flops("10B", 10e9, "LLaMA 3.2 11B", 11e9, 16.5),
    flops("10B", 10e9, "Pixtral 12B", 12e9, 9.0),
    flops("10B", 10e9, "LLaVA v1.6 7B", 7e9, 5.25),
    flops("10B", 10e9, "LLaVA v1.5 7B", 7e9, 5.25),
];
