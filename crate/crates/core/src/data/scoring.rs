//! Rule-based relevance scores of a question for each demographic category.
//!
//! A question is matched to a topic by keywords; each topic has a fixed
//! table of scores and reasons per age bin, gender and race. The output
//! has the shape of the scoring listing used for AlpaGasus-style data:
//! `{question, age: [...], gender: [...], race: [...]}` where each entry
//! is `{category, score, reason}`.

use serde::{Deserialize, Serialize};

use super::assign::words;
use super::profile::{Age, Gender, Race};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryScore {
    pub category: String,
    pub score: f64,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreSheet {
    pub question: String,
    pub age: Vec<CategoryScore>,
    pub gender: Vec<CategoryScore>,
    pub race: Vec<CategoryScore>,
}

/// The categories to score. Gender categories are written capitalized,
/// the other classes use their profile labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategorySchema {
    pub age: Vec<String>,
    pub gender: Vec<String>,
    pub race: Vec<String>,
}

impl CategorySchema {
    /// Every class of every attribute.
    pub fn full() -> Self {
        Self {
            age: Age::ALL.iter().map(|a| a.as_str().to_string()).collect(),
            gender: Gender::ALL
                .iter()
                .map(|&g| gender_label(g).to_string())
                .collect(),
            race: Race::ALL.iter().map(|r| r.as_str().to_string()).collect(),
        }
    }

    /// The categories shown in the published scoring listing.
    pub fn listing() -> Self {
        Self {
            age: vec!["0-2".into(), "20-29".into()],
            gender: vec!["Male".into(), "Female".into()],
            race: vec!["east asian".into(), "indian".into()],
        }
    }
}

fn gender_label(g: Gender) -> &'static str {
    match g {
        Gender::Male => "Male",
        Gender::Female => "Female",
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Topic {
    Health,
    Technology,
    Career,
    Money,
    Family,
    General,
}

const KEYWORDS: &[(Topic, &[&str])] = &[
    (
        Topic::Health,
        &[
            "health", "healthy", "exercise", "diet", "sleep", "fit", "fitness", "doctor", "food",
        ],
    ),
    (
        Topic::Technology,
        &[
            "phone",
            "computer",
            "app",
            "apps",
            "technology",
            "internet",
            "online",
            "game",
            "games",
        ],
    ),
    (
        Topic::Career,
        &[
            "job",
            "career",
            "work",
            "interview",
            "resume",
            "office",
            "skills",
        ],
    ),
    (
        Topic::Money,
        &[
            "money", "save", "saving", "budget", "invest", "spend", "bank",
        ],
    ),
    (
        Topic::Family,
        &[
            "family",
            "kids",
            "parent",
            "parents",
            "parenting",
            "baby",
            "home",
        ],
    ),
];

/// First topic with a keyword in the question, or `General`.
pub fn topic_of(question: &str) -> Topic {
    let w = words(question);
    KEYWORDS
        .iter()
        .find(|(_, keys)| w.iter().any(|x| keys.contains(&x.as_str())))
        .map(|(t, _)| *t)
        .unwrap_or(Topic::General)
}

type Row = (f64, &'static str);

fn age_row(topic: Topic, age: Age) -> Row {
    use Age::*;
    match topic {
        Topic::Health => match age {
            A0_2 => (0.0, "Too young to understand health tips."),
            A3_9 => (0.3, "Health routines are set by caregivers."),
            A10_19 => (0.5, "Forming habits that last into adulthood."),
            A20_29 | A30_39 => (
                0.8,
                "More likely to be interested in health and well-being.",
            ),
            A40_49 | A50_59 => (0.8, "Health checks become a regular concern."),
            A60_69 | Over70 => (0.7, "Interested, but tips must suit older bodies."),
        },
        Topic::Technology => match age {
            A0_2 => (0.0, "Too young to use devices."),
            A3_9 => (0.4, "Uses devices with supervision."),
            A10_19 | A20_29 => (0.9, "Daily users of apps and online services."),
            A30_39 | A40_49 => (0.7, "Uses technology for work and home."),
            A50_59 => (0.5, "Uses common tools, fewer new ones."),
            A60_69 | Over70 => (0.4, "May need simpler guidance with devices."),
        },
        Topic::Career => match age {
            A0_2 | A3_9 => (0.0, "Too young for work questions."),
            A10_19 => (0.4, "Starting to think about future jobs."),
            A20_29 | A30_39 => (0.9, "Building a career is a main concern."),
            A40_49 | A50_59 => (0.7, "Focused on growth or change at work."),
            A60_69 => (0.4, "Planning for retirement."),
            Over70 => (0.2, "Mostly retired."),
        },
        Topic::Money => match age {
            A0_2 | A3_9 => (0.0, "Too young to manage money."),
            A10_19 => (0.4, "Learning to handle pocket money."),
            A20_29 | A30_39 | A40_49 => (0.8, "Managing income and expenses."),
            A50_59 | A60_69 => (0.7, "Saving for later life."),
            Over70 => (0.5, "Living on savings or a pension."),
        },
        Topic::Family => match age {
            A0_2 | A3_9 => (0.1, "Is the one cared for at home."),
            A10_19 => (0.3, "Lives with family, rarely plans it."),
            A20_29 => (0.6, "May be starting a family."),
            A30_39 | A40_49 => (0.8, "Often raising children."),
            A50_59 | A60_69 | Over70 => (0.6, "Supports grown children or grandchildren."),
        },
        Topic::General => match age {
            A0_2 => (0.0, "Too young to ask questions."),
            A3_9 => (0.3, "Needs very simple answers."),
            _ => (0.6, "Likely interested in general advice."),
        },
    }
}

fn gender_row(topic: Topic, g: Gender) -> Row {
    match (topic, g) {
        (Topic::Health, Gender::Male) => (0.5, "Men may show varied interest in health."),
        (Topic::Health, Gender::Female) => (
            0.6,
            "Women tend to show higher interest in health and well-being.",
        ),
        (Topic::Family, Gender::Male) => (0.5, "Interest depends on role at home."),
        (Topic::Family, Gender::Female) => (0.5, "Interest depends on role at home."),
        (_, _) => (0.5, "No clear difference between genders."),
    }
}

fn race_row(topic: Topic, _r: Race) -> Row {
    match topic {
        Topic::Health => (0.6, "Generally health-conscious but varies across groups."),
        _ => (0.5, "No clear difference across groups."),
    }
}

fn entry(category: &str, (score, reason): Row) -> CategoryScore {
    CategoryScore {
        category: category.to_string(),
        score: score.clamp(0.0, 1.0),
        reason: reason.to_string(),
    }
}

/// Scores `question` for every category in `schema`.
pub fn score_categories(question: &str, schema: &CategorySchema) -> Result<ScoreSheet> {
    let topic = topic_of(question);
    let unknown =
        |kind: &str, c: &str| Error::Config(format!("unknown {kind} category `{c}` in schema"));
    let age = schema
        .age
        .iter()
        .map(|c| {
            c.parse::<Age>()
                .map(|a| entry(c, age_row(topic, a)))
                .map_err(|_| unknown("age", c))
        })
        .collect::<Result<_>>()?;
    let gender = schema
        .gender
        .iter()
        .map(|c| {
            Gender::ALL
                .iter()
                .find(|&&g| gender_label(g) == c)
                .map(|&g| entry(c, gender_row(topic, g)))
                .ok_or_else(|| unknown("gender", c))
        })
        .collect::<Result<_>>()?;
    let race = schema
        .race
        .iter()
        .map(|c| {
            c.parse::<Race>()
                .map(|r| entry(c, race_row(topic, r)))
                .map_err(|_| unknown("race", c))
        })
        .collect::<Result<_>>()?;
    Ok(ScoreSheet {
        question: question.to_string(),
        age,
        gender,
        race,
    })
}
