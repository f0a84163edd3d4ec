use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Where an instruction example comes from. Each tag is a synthetic
/// analog of one family of tuning data; `Docci` marks general-purpose
/// description records used as the regularizer stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceTag {
    FaceTask,
    Alpagasus,
    Alexa,
    Nle,
    Docci,
}

impl SourceTag {
    pub const ALL: [SourceTag; 5] = [
        SourceTag::FaceTask,
        SourceTag::Alpagasus,
        SourceTag::Alexa,
        SourceTag::Nle,
        SourceTag::Docci,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SourceTag::FaceTask => "facetask",
            SourceTag::Alpagasus => "alpagasus",
            SourceTag::Alexa => "alexa",
            SourceTag::Nle => "nle",
            SourceTag::Docci => "docci",
        }
    }
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SourceTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SourceTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Data(format!("unknown source tag `{s}`")))
    }
}

/// Alignment pair `(i, p)`: an image and its profile description.
///
/// `question` is the text channel, which alignment requires to be empty.
#[derive(Clone, Debug, PartialEq)]
pub struct PtExample {
    pub id: String,
    pub image: Tensor,
    pub question: String,
    pub profile_text: String,
}

/// Instruction triple `(i, q, a)`.
#[derive(Clone, Debug, PartialEq)]
pub struct InstructExample {
    pub id: String,
    pub image: Tensor,
    pub question: String,
    pub answer: String,
    pub source_tag: SourceTag,
}

/// Preference quadruple `(i, q, a⁺, a⁻)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DpoExample {
    pub id: String,
    pub image: Tensor,
    pub question: String,
    pub chosen: String,
    pub rejected: String,
}

impl InstructExample {
    pub fn validate(&self) -> Result<()> {
        if self.question.trim().is_empty() || self.answer.trim().is_empty() {
            return Err(Error::Validation(format!(
                "instruction example `{}` needs a question and an answer",
                self.id
            )));
        }
        Ok(())
    }
}

impl DpoExample {
    pub fn validate(&self) -> Result<()> {
        if self.chosen == self.rejected {
            return Err(Error::Validation(format!(
                "preference example `{}` has identical chosen and rejected answers",
                self.id
            )));
        }
        Ok(())
    }
}
