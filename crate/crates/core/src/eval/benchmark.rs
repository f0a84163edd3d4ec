use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::bias::BinaryBagCosine;
use super::rouge::{rouge1, rouge_l, RougeScore};
use crate::data::{InstructExample, Similarity};
use crate::error::{Error, Result};
use crate::model::{GenerationConfig, ToyVlm};

/// A column family of the benchmark table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Rouge1,
    RougeL,
    Similarity,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Rouge1, Metric::RougeL, Metric::Similarity];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Rouge1 => "rouge1",
            Metric::RougeL => "rouge_l",
            Metric::Similarity => "similarity",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown metric `{s}` (expected rouge1, rouge_l or similarity)"
                ))
            })
    }
}

/// Parses metric names, dropping duplicates and keeping first-seen order.
pub fn parse_metrics<S: AsRef<str>>(names: &[S]) -> Result<Vec<Metric>> {
    let mut out = Vec::new();
    for n in names {
        let m: Metric = n.as_ref().parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(Error::Config("no metrics requested".into()));
    }
    Ok(out)
}

/// A model output paired with its reference answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub task: String,
    pub response: String,
    pub reference: String,
}

/// Mean scores of one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task: String,
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge1: Option<RougeScore>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<RougeScore>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
}

/// Per-task table plus an `all` row over every entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub metrics: Vec<Metric>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_digest: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    pub tasks: Vec<TaskRow>,
    pub all: TaskRow,
}

fn row(task: &str, items: &[&Scored], metrics: &[Metric], sim: &dyn Similarity) -> TaskRow {
    let n = items.len() as f64;
    let mean_rouge = |f: fn(&str, &str) -> RougeScore| {
        let (mut p, mut r, mut f1) = (0.0, 0.0, 0.0);
        for s in items {
            let x = f(&s.response, &s.reference);
            p += x.precision;
            r += x.recall;
            f1 += x.f1;
        }
        RougeScore {
            precision: p / n,
            recall: r / n,
            f1: f1 / n,
        }
    };
    TaskRow {
        task: task.to_string(),
        count: items.len(),
        rouge1: metrics
            .contains(&Metric::Rouge1)
            .then(|| mean_rouge(rouge1)),
        rouge_l: metrics
            .contains(&Metric::RougeL)
            .then(|| mean_rouge(rouge_l)),
        similarity: metrics.contains(&Metric::Similarity).then(|| {
            items
                .iter()
                .map(|s| sim.similarity(&s.response, &s.reference))
                .sum::<f64>()
                / n
        }),
    }
}

/// Averages the requested metrics per task. Tasks appear sorted by name;
/// within a task, sums run in input order so reports are bitwise stable.
pub fn score_responses(
    items: &[Scored],
    metrics: &[Metric],
    sim: &dyn Similarity,
) -> Result<BenchmarkReport> {
    if items.is_empty() {
        return Err(Error::Data("benchmark has no entries".into()));
    }
    if metrics.is_empty() {
        return Err(Error::Config("no metrics requested".into()));
    }
    let mut names: Vec<&str> = items.iter().map(|s| s.task.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    let tasks = names
        .iter()
        .map(|t| {
            let mine: Vec<&Scored> = items.iter().filter(|s| s.task == *t).collect();
            row(t, &mine, metrics, sim)
        })
        .collect();
    let everything: Vec<&Scored> = items.iter().collect();
    Ok(BenchmarkReport {
        metrics: metrics.to_vec(),
        checkpoint_digest: None,
        config_digest: None,
        tasks,
        all: row("all", &everything, metrics, sim),
    })
}

/// Answers every question greedily, with no instruction added to the
/// prompt, and scores the answers against the references.
pub fn run_benchmark(
    model: &ToyVlm,
    data: &[InstructExample],
    metrics: &[Metric],
    gen: GenerationConfig,
) -> Result<(Vec<Scored>, BenchmarkReport)> {
    let mut items = Vec::with_capacity(data.len());
    for ex in data {
        items.push(Scored {
            task: ex.source_tag.to_string(),
            response: model.generate_greedy(&ex.image, &ex.question, gen)?.text,
            reference: ex.answer.clone(),
        });
    }
    let report = score_responses(&items, metrics, &BinaryBagCosine)?;
    Ok((items, report))
}

impl BenchmarkReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table, one line per task.
    pub fn to_table(&self) -> String {
        let mut header = vec!["task".to_string(), "n".to_string()];
        for m in &self.metrics {
            match m {
                Metric::Rouge1 => header.extend(["R1-P", "R1-R", "R1-F1"].map(String::from)),
                Metric::RougeL => header.extend(["RL-P", "RL-R", "RL-F1"].map(String::from)),
                Metric::Similarity => header.push("Sim".into()),
            }
        }
        let cells = |r: &TaskRow| {
            let mut c = vec![r.task.clone(), r.count.to_string()];
            for m in &self.metrics {
                let rouge = |s: Option<RougeScore>| {
                    let s = s.unwrap_or_default();
                    [s.precision, s.recall, s.f1].map(|v| format!("{v:.3}"))
                };
                match m {
                    Metric::Rouge1 => c.extend(rouge(r.rouge1)),
                    Metric::RougeL => c.extend(rouge(r.rouge_l)),
                    Metric::Similarity => c.push(format!("{:.3}", r.similarity.unwrap_or(0.0))),
                }
            }
            c
        };
        let mut rows = vec![header];
        rows.extend(self.tasks.iter().map(cells));
        rows.push(cells(&self.all));
        render_table(&rows)
    }
}

/// Left-aligns the first column and right-aligns the rest, with a rule
/// under the header.
pub fn render_table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let width: Vec<usize> = (0..cols)
        .map(|j| {
            rows.iter()
                .filter_map(|r| r.get(j))
                .map(|c| c.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for (i, r) in rows.iter().enumerate() {
        let mut line = String::new();
        for (j, c) in r.iter().enumerate() {
            if j == 0 {
                let _ = write!(line, "{c:<w$}", w = width[0]);
            } else {
                let _ = write!(line, "  {c:>w$}", w = width[j]);
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
        if i == 0 {
            let total = width.iter().sum::<usize>() + 2 * cols.saturating_sub(1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(response: impl Fn(&str) -> String) -> Vec<Scored> {
        [
            ("face", "a young woman"),
            ("face", "an older man"),
            ("advice", "drink water daily"),
        ]
        .into_iter()
        .map(|(t, r)| Scored {
            task: t.into(),
            response: response(r),
            reference: r.into(),
        })
        .collect()
    }

    #[test]
    fn perfect_model_scores_one() {
        let r = score_responses(&items(|r| r.into()), &Metric::ALL, &BinaryBagCosine).unwrap();
        for row in r.tasks.iter().chain([&r.all]) {
            for s in [row.rouge1.unwrap(), row.rouge_l.unwrap()] {
                assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
            }
            assert_eq!(row.similarity, Some(1.0));
        }
        assert_eq!(
            r.tasks.iter().map(|t| t.task.as_str()).collect::<Vec<_>>(),
            ["advice", "face"]
        );
        assert_eq!(r.all.count, 3);
    }

    #[test]
    fn empty_output_scores_zero() {
        let r = score_responses(&items(|_| String::new()), &Metric::ALL, &BinaryBagCosine).unwrap();
        let s = r.all.rouge1.unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        assert_eq!(r.all.similarity, Some(0.0));
    }

    #[test]
    fn unknown_metric_is_config_error() {
        assert!(matches!(
            parse_metrics(&["rouge1", "bleu"]),
            Err(Error::Config(_))
        ));
        assert_eq!(
            parse_metrics(&["rouge_l", "rouge1", "rouge_l"]).unwrap(),
            [Metric::RougeL, Metric::Rouge1]
        );
        assert!(matches!(parse_metrics::<&str>(&[]), Err(Error::Config(_))));
    }

    #[test]
    fn empty_benchmark_is_data_error() {
        assert!(matches!(
            score_responses(&[], &Metric::ALL, &BinaryBagCosine),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn only_requested_metrics_are_reported() {
        let r = score_responses(&items(|r| r.into()), &[Metric::RougeL], &BinaryBagCosine).unwrap();
        assert!(r.all.rouge1.is_none() && r.all.similarity.is_none() && r.all.rouge_l.is_some());
        let json = r.to_json();
        assert!(!json.contains("\"rouge1\"") && json.contains("\"rouge_l\""));
    }

    #[test]
    fn reports_are_stable_and_round_trip() {
        let a = score_responses(
            &items(|r| format!("{r} indeed")),
            &Metric::ALL,
            &BinaryBagCosine,
        )
        .unwrap();
        let b = score_responses(
            &items(|r| format!("{r} indeed")),
            &Metric::ALL,
            &BinaryBagCosine,
        )
        .unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.to_table(), b.to_table());
        let back: BenchmarkReport = serde_json::from_str(&a.to_json()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn table_columns_line_up() {
        let r = score_responses(&items(|r| r.into()), &Metric::ALL, &BinaryBagCosine).unwrap();
        let t = r.to_table();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 2 + 2 + 1);
        assert!(lines[0].starts_with("task") && lines[0].ends_with("Sim"));
        assert!(lines[1].chars().all(|c| c == '-'));
        let width = lines[0].len();
        assert!(lines.iter().all(|l| l.len() == width), "{t}");
    }
}
