use serde::{Deserialize, Serialize};

use super::benchmark::render_table;
use super::reference::{FLOPS_REDUCTIONS, PUBLISHED_TOKENS};
use crate::error::{Error, Result};

/// How inference cost grows with model size and prompt length.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostModel {
    /// `params * tokens`.
    #[default]
    Linear,
    /// `params * tokens + attention * tokens^2`, where `attention` folds
    /// layer count and width into one coefficient.
    Quadratic { attention: f64 },
}

impl CostModel {
    pub fn cost(self, params: f64, tokens: f64) -> f64 {
        match self {
            CostModel::Linear => params * tokens,
            CostModel::Quadratic { attention } => params * tokens + attention * tokens * tokens,
        }
    }
}

/// A baseline run against ours, each with its prompt length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlopsComparison {
    pub base_params: f64,
    pub base_tokens: f64,
    pub ours_params: f64,
    pub ours_tokens: f64,
    #[serde(default)]
    pub cost_model: CostModel,
}

/// How many times cheaper our run is than the baseline.
pub fn flops_ratio(cmp: &FlopsComparison) -> Result<f64> {
    for (name, v) in [
        ("base_params", cmp.base_params),
        ("base_tokens", cmp.base_tokens),
        ("ours_params", cmp.ours_params),
        ("ours_tokens", cmp.ours_tokens),
    ] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::Validation(format!(
                "{name} must be positive, got {v}"
            )));
        }
    }
    if let CostModel::Quadratic { attention } = cmp.cost_model {
        if !(attention.is_finite() && attention >= 0.0) {
            return Err(Error::Validation(format!(
                "attention coefficient must be non-negative, got {attention}"
            )));
        }
    }
    let ours = cmp.cost_model.cost(cmp.ours_params, cmp.ours_tokens);
    Ok(cmp.cost_model.cost(cmp.base_params, cmp.base_tokens) / ours)
}

/// A computed factor next to the published one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsRow {
    pub ours: String,
    pub baseline: String,
    pub comparison: FlopsComparison,
    pub computed: f64,
    /// The published factor, when there is one.
    pub reference: Option<f64>,
}

/// Every published comparison, recomputed under `cost_model` with the
/// baseline reading instruction plus question and ours the question alone.
pub fn reference_comparisons(cost_model: CostModel) -> Result<Vec<FlopsRow>> {
    FLOPS_REDUCTIONS
        .iter()
        .map(|r| {
            let comparison = FlopsComparison {
                base_params: r.baseline_params,
                base_tokens: PUBLISHED_TOKENS.combined,
                ours_params: r.ours_params,
                ours_tokens: PUBLISHED_TOKENS.question,
                cost_model,
            };
            Ok(FlopsRow {
                ours: r.ours.into(),
                baseline: r.baseline.into(),
                computed: flops_ratio(&comparison)?,
                comparison,
                reference: Some(r.factor),
            })
        })
        .collect()
}

/// Checks the claim behind the published factors: every one of them is a
/// reduction. Their cost model is not stated, so nothing stronger is checked.
pub fn check_reference_reductions() -> Result<()> {
    match FLOPS_REDUCTIONS.iter().find(|r| r.factor <= 1.0) {
        Some(r) => Err(Error::Validation(format!(
            "{} vs {}: factor {} is not a reduction",
            r.ours, r.baseline, r.factor
        ))),
        None => Ok(()),
    }
}

/// Plain-text table with both the computed and the published factor.
pub fn flops_table(rows: &[FlopsRow]) -> String {
    let mut t = vec![[
        "ours",
        "baseline",
        "base tok",
        "ours tok",
        "computed",
        "reference",
    ]
    .map(String::from)
    .to_vec()];
    for r in rows {
        t.push(vec![
            r.ours.clone(),
            r.baseline.clone(),
            format!("{}", r.comparison.base_tokens),
            format!("{}", r.comparison.ours_tokens),
            format!("{:.2}X", r.computed),
            r.reference.map_or("-".into(), |f| format!("{f}X")),
        ]);
    }
    render_table(&t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cmp(bp: f64, bt: f64, op: f64, ot: f64) -> FlopsComparison {
        FlopsComparison {
            base_params: bp,
            base_tokens: bt,
            ours_params: op,
            ours_tokens: ot,
            cost_model: CostModel::Linear,
        }
    }

    #[test]
    fn linear_examples() {
        assert_eq!(flops_ratio(&cmp(3e9, 50.0, 3e9, 50.0)).unwrap(), 1.0);
        assert!((flops_ratio(&cmp(7e9, 150.0, 3e9, 50.0)).unwrap() - 7.0).abs() < 1e-9);
    }

    #[test]
    fn non_positive_inputs_are_rejected() {
        for c in [
            cmp(0.0, 1.0, 1.0, 1.0),
            cmp(1.0, 1.0, 1.0, 0.0),
            cmp(1.0, -1.0, 1.0, 1.0),
            cmp(1.0, 1.0, f64::NAN, 1.0),
        ] {
            assert!(matches!(flops_ratio(&c), Err(Error::Validation(_))));
        }
    }

    #[test]
    fn quadratic_term_favours_short_prompts_more() {
        let mut c = cmp(7e9, 150.0, 3e9, 50.0);
        c.cost_model = CostModel::Quadratic { attention: 1e8 };
        let q = flops_ratio(&c).unwrap();
        assert!(q > 7.0, "{q}");
        c.cost_model = CostModel::Quadratic { attention: 0.0 };
        assert!((flops_ratio(&c).unwrap() - 7.0).abs() < 1e-12);
    }

    #[test]
    fn reference_rows_carry_both_factors() {
        check_reference_reductions().unwrap();
        let rows = reference_comparisons(CostModel::Linear).unwrap();
        assert_eq!(rows.len(), 8);
        // 11B reading 150 tokens against 3B reading 50
        assert!((rows[0].computed - 11.0).abs() < 1e-9);
        assert_eq!(rows[0].reference, Some(22.5));
        let text = flops_table(&rows);
        assert!(text.contains("22.5X") && text.contains("11.00X"), "{text}");
    }

    #[test]
    fn comparison_json_defaults_to_linear() {
        let c: FlopsComparison = serde_json::from_str(
            r#"{"base_params":7e9,"base_tokens":150,"ours_params":3e9,"ours_tokens":50}"#,
        )
        .unwrap();
        assert_eq!(c.cost_model, CostModel::Linear);
        let q: CostModel = serde_json::from_str(r#"{"kind":"quadratic","attention":2.0}"#).unwrap();
        assert_eq!(q, CostModel::Quadratic { attention: 2.0 });
    }
}
