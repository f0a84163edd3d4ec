use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! closed_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }

            pub fn index(self) -> usize {
                Self::ALL.iter().position(|&v| v == self).expect("listed")
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                Self::ALL
                    .iter()
                    .copied()
                    .find(|v| v.as_str() == s)
                    .ok_or_else(|| Error::Validation(format!(
                        concat!("unknown ", stringify!($name), " class `{}`"), s
                    )))
            }
        }

        impl Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.serialize_str(self.as_str())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

closed_enum!(
    /// FairFace age bins.
    Age {
        A0_2 => "0-2",
        A3_9 => "3-9",
        A10_19 => "10-19",
        A20_29 => "20-29",
        A30_39 => "30-39",
        A40_49 => "40-49",
        A50_59 => "50-59",
        A60_69 => "60-69",
        Over70 => "more than 70",
    }
);

closed_enum!(
    Gender {
        Male => "male",
        Female => "female",
    }
);

closed_enum!(
    /// FairFace ethnicity labels.
    Race {
        White => "white",
        Black => "black",
        LatinoHispanic => "latino hispanic",
        EastAsian => "east asian",
        SoutheastAsian => "southeast asian",
        Indian => "indian",
        MiddleEastern => "middle eastern",
    }
);

closed_enum!(
    /// Seven basic emotions.
    Emotion {
        Angry => "angry",
        Disgusted => "disgusted",
        Fearful => "fearful",
        Happy => "happy",
        Neutral => "neutral",
        Sad => "sad",
        Surprised => "surprised",
    }
);

impl Age {
    /// Coarse life stage used to personalize answers.
    pub fn life_stage(self) -> &'static str {
        match self {
            Age::A0_2 | Age::A3_9 => "child",
            Age::A10_19 => "teenager",
            Age::A20_29 | Age::A30_39 => "young adult",
            Age::A40_49 | Age::A50_59 => "adult",
            Age::A60_69 | Age::Over70 => "senior",
        }
    }

    pub fn is_minor(self) -> bool {
        matches!(self, Age::A0_2 | Age::A3_9 | Age::A10_19)
    }
}

/// A synthetic user: demographic classes, an emotion and free-form extras.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSpec {
    pub age: Age,
    pub gender: Gender,
    pub race: Race,
    pub emotion: Emotion,
    #[serde(default)]
    pub extra_attributes: BTreeMap<String, String>,
}

impl ProfileSpec {
    pub fn new(age: Age, gender: Gender, race: Race, emotion: Emotion) -> Self {
        let mut extra = BTreeMap::new();
        extra.insert("life_stage".to_string(), age.life_stage().to_string());
        extra.insert("person".to_string(), person_word(age, gender).to_string());
        Self {
            age,
            gender,
            race,
            emotion,
            extra_attributes: extra,
        }
    }

    /// Every age × gender × race × emotion combination, in enumeration order.
    pub fn enumerate() -> Vec<ProfileSpec> {
        let mut out = Vec::new();
        for &a in Age::ALL {
            for &g in Gender::ALL {
                for &r in Race::ALL {
                    for &e in Emotion::ALL {
                        out.push(ProfileSpec::new(a, g, r, e));
                    }
                }
            }
        }
        out
    }

    pub fn demographics(&self) -> Demographics {
        Demographics {
            age: self.age,
            gender: self.gender,
            race: self.race,
        }
    }

    /// Noun for the person: girl, boy, woman or man.
    pub fn person(&self) -> &'static str {
        person_word(self.age, self.gender)
    }

    /// Profile text plus extra attributes and emotion, used for similarity
    /// matching against questions.
    pub fn description(&self) -> String {
        let mut s = render_profile(self);
        for v in self.extra_attributes.values() {
            s.push(' ');
            s.push_str(v);
        }
        s.push(' ');
        s.push_str(self.emotion.as_str());
        s
    }
}

fn person_word(age: Age, gender: Gender) -> &'static str {
    match (age.is_minor(), gender) {
        (true, Gender::Female) => "girl",
        (true, Gender::Male) => "boy",
        (false, Gender::Female) => "woman",
        (false, Gender::Male) => "man",
    }
}

/// The three classes the profile sentence carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Demographics {
    pub age: Age,
    pub gender: Gender,
    pub race: Race,
}

const PREFIX: &str = "The person appears to be ";
const MIDDLE: &str = ", approximately ";
const SUFFIX: &str = " years old.";

/// `The person appears to be {race} {gender}, approximately {age} years old.`
pub fn render_profile(p: &ProfileSpec) -> String {
    format!("{PREFIX}{} {}{MIDDLE}{}{SUFFIX}", p.race, p.gender, p.age)
}

/// Inverse of [`render_profile`] for the classes it renders.
pub fn parse_profile(text: &str) -> Result<Demographics> {
    let bad = || Error::Validation(format!("not a profile sentence: `{text}`"));
    let body = text
        .strip_prefix(PREFIX)
        .and_then(|t| t.strip_suffix(SUFFIX))
        .ok_or_else(bad)?;
    let (race_gender, age) = body.split_once(MIDDLE).ok_or_else(bad)?;
    let (race, gender) = race_gender.rsplit_once(' ').ok_or_else(bad)?;
    Ok(Demographics {
        age: age.parse()?,
        gender: gender.parse()?,
        race: race.parse()?,
    })
}

/// Instruction used by prompt-based personalization baselines.
pub fn render_personalization_prompt(profile: &str, question: &str) -> Result<String> {
    if profile.trim().is_empty() {
        return Err(Error::Validation(
            "personalization prompt needs a profile".into(),
        ));
    }
    Ok(format!(
        "Imagine you are answering questions of {profile}. Provide personalized respond according to the \
         demographic, socio-emotive profile of the user to the following question:{question}"
    ))
}
