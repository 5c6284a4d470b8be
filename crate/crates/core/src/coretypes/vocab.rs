use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default AU to ARKit-51 channel map, versioned with the crate.
pub const DEFAULT_AU_MAP_JSON: &str = include_str!("../../assets/au_map_v1.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaceRegion {
    Upper,
    Lower,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuEntry {
    pub id: String,
    pub region: FaceRegion,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub channels: Vec<usize>,
}

/// Ordered action-unit vocabulary with its channel map.
///
/// Column `j` of every fine grid refers to `entries()[j]`. Channel sets may
/// overlap across AUs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuVocabulary {
    pub version: u32,
    pub num_channels: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub channel_names: Vec<String>,
    #[serde(rename = "aus")]
    entries: Vec<AuEntry>,
}

impl AuVocabulary {
    pub fn new(num_channels: usize, entries: Vec<AuEntry>) -> Result<Self> {
        let v = Self { version: 1, num_channels, channel_names: Vec::new(), entries };
        v.validate()?;
        Ok(v)
    }

    /// The shipped 16-AU map over 51 ARKit channels.
    pub fn default_arkit() -> Self {
        Self::from_json(DEFAULT_AU_MAP_JSON).expect("bundled AU map is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: Self = serde_json::from_str(text)?;
        v.validate()?;
        Ok(v)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("vocabulary serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Config(format!("duplicate AU id {}", e.id)));
            }
            if e.channels.is_empty() {
                return Err(Error::Config(format!("AU {} maps to no channels", e.id)));
            }
            if let Some(&c) = e.channels.iter().find(|&&c| c >= self.num_channels) {
                return Err(Error::Config(format!(
                    "AU {} maps to channel {c} but D = {}",
                    e.id, self.num_channels
                )));
            }
        }
        if !self.channel_names.is_empty() && self.channel_names.len() != self.num_channels {
            return Err(Error::Config(format!(
                "{} channel names for {} channels",
                self.channel_names.len(),
                self.num_channels
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[AuEntry] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &AuEntry {
        &self.entries[index]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.id == id)
    }

    /// Like [`index_of`](Self::index_of) but unknown ids are a configuration error.
    pub fn require(&self, id: &str) -> Result<usize> {
        self.index_of(id)
            .ok_or_else(|| Error::Config(format!("AU {id} is not in the vocabulary")))
    }

    pub fn channels(&self, index: usize) -> &[usize] {
        &self.entries[index].channels
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    pub fn region_indices(&self, region: FaceRegion) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.entries[i].region == region).collect()
    }

    /// Union of the channel sets of the given AUs.
    pub fn channel_union(&self, indices: &[usize]) -> BTreeSet<usize> {
        indices.iter().flat_map(|&i| self.entries[i].channels.iter().copied()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_map_has_sixteen_aus_split_by_region() {
        let v = AuVocabulary::default_arkit();
        assert_eq!(v.len(), 16);
        assert_eq!(v.num_channels, 51);
        let upper: Vec<&str> = v.region_indices(FaceRegion::Upper).iter().map(|&i| v.entry(i).id.as_str()).collect();
        let lower: Vec<&str> = v.region_indices(FaceRegion::Lower).iter().map(|&i| v.entry(i).id.as_str()).collect();
        assert_eq!(upper, ["AU01", "AU02", "AU04", "AU05", "AU06", "AU07", "AU45"]);
        assert_eq!(lower, ["AU09", "AU10", "AU12", "AU14", "AU15", "AU17", "AU20", "AU26", "AU28"]);
        let smile = v.require("AU12").unwrap();
        let names: Vec<&str> = v.channels(smile).iter().map(|&c| v.channel_names[c].as_str()).collect();
        assert_eq!(names, ["mouthSmileLeft", "mouthSmileRight"]);
        let blink = v.require("AU45").unwrap();
        let names: Vec<&str> = v.channels(blink).iter().map(|&c| v.channel_names[c].as_str()).collect();
        assert_eq!(names, ["eyeBlinkLeft", "eyeBlinkRight"]);
    }

    #[test]
    fn json_round_trip() {
        let v = AuVocabulary::default_arkit();
        assert_eq!(AuVocabulary::from_json(&v.to_json()).unwrap(), v);
    }

    #[test]
    fn out_of_range_channel_is_rejected() {
        let e = AuEntry { id: "AU01".into(), region: FaceRegion::Upper, description: String::new(), channels: vec![51] };
        assert!(matches!(AuVocabulary::new(51, vec![e]), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_au_is_a_config_error() {
        assert!(matches!(AuVocabulary::default_arkit().require("AU99"), Err(Error::Config(_))));
    }
}
