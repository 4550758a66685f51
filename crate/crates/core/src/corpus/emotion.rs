use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Arousal,
    Valence,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Arousal => "arousal",
            Axis::Valence => "valence",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "arousal" => Ok(Axis::Arousal),
            "valence" => Ok(Axis::Valence),
            other => Err(Error::InvalidConfig(format!("unknown axis `{other}` (arousal|valence)"))),
        }
    }
}

/// `(emotion, arousal class, valence class)`; class 1 is High / Positive.
pub const TABLE_EMOTIONS: [(&str, usize, usize); 9] = [
    ("anger", 1, 0),
    ("boredom", 0, 0),
    ("calm", 0, 1),
    ("disgust", 1, 0),
    ("fear", 1, 0),
    ("happiness", 1, 1),
    ("neutrality", 0, 1),
    ("sadness", 0, 0),
    ("surprise", 1, 1),
];

/// Categorical-to-binary emotion mapping with optional aliases.
#[derive(Debug, Clone, PartialEq)]
pub struct EmotionMap {
    pub axis: Axis,
    aliases: BTreeMap<String, String>,
}

impl EmotionMap {
    pub fn new(axis: Axis) -> Self {
        Self { axis, aliases: BTreeMap::new() }
    }

    /// Registers `alias` as another spelling of a table emotion.
    pub fn register_alias(&mut self, alias: &str, canonical: &str) -> Result<()> {
        let canonical = canonical.trim().to_ascii_lowercase();
        if !TABLE_EMOTIONS.iter().any(|(e, _, _)| *e == canonical) {
            return Err(Error::UnknownEmotion(canonical));
        }
        self.aliases.insert(alias.trim().to_ascii_lowercase(), canonical);
        Ok(())
    }

    pub fn class_of(&self, label: &str) -> Result<usize> {
        let key = label.trim().to_ascii_lowercase();
        let key = self.aliases.get(&key).cloned().unwrap_or(key);
        TABLE_EMOTIONS
            .iter()
            .find(|(e, _, _)| *e == key)
            .map(|&(_, a, v)| match self.axis {
                Axis::Arousal => a,
                Axis::Valence => v,
            })
            .ok_or_else(|| Error::UnknownEmotion(label.to_string()))
    }
}

/// Binary class of a table emotion: 0 = Low/Negative, 1 = High/Positive.
pub fn map_emotion(label: &str, axis: Axis) -> Result<usize> {
    EmotionMap::new(axis).class_of(label)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(map_emotion("anger", Axis::Arousal).unwrap(), 1);
        assert_eq!(map_emotion("sadness", Axis::Arousal).unwrap(), 0);
        assert_eq!(map_emotion("surprise", Axis::Valence).unwrap(), 1);
        match map_emotion("joyful", Axis::Arousal) {
            Err(Error::UnknownEmotion(s)) => assert_eq!(s, "joyful"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn aliases() {
        let mut m = EmotionMap::new(Axis::Valence);
        assert!(m.class_of("happy").is_err());
        m.register_alias("happy", "happiness").unwrap();
        assert_eq!(m.class_of("Happy").unwrap(), 1);
        assert!(m.register_alias("x", "joy").is_err());
    }

    #[test]
    fn both_axes_cover_the_same_emotions() {
        for (e, _, _) in TABLE_EMOTIONS {
            assert!(map_emotion(e, Axis::Arousal).is_ok());
            assert!(map_emotion(e, Axis::Valence).is_ok());
        }
    }
}
