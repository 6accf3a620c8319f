use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Vocab;
use crate::error::{Error, Result};

/// Lexical unit to frame, and frame to frame-element inventories.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ontology {
    pub lu_to_frames: BTreeMap<String, BTreeSet<String>>,
    pub frame_to_elements: BTreeMap<String, BTreeSet<String>>,
}

impl Ontology {
    pub fn validate(&self) -> Result<()> {
        for (lu, frames) in &self.lu_to_frames {
            if frames.is_empty() {
                return Err(Error::Config(format!("lexical unit `{lu}` evokes no frame")));
            }
            for f in frames {
                if !self.frame_to_elements.contains_key(f) {
                    return Err(Error::Config(format!(
                        "frame `{f}` of lexical unit `{lu}` has no frame-element entry"
                    )));
                }
            }
        }
        for (f, fes) in &self.frame_to_elements {
            if fes.is_empty() {
                return Err(Error::Config(format!("frame `{f}` has no frame elements")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let o: Ontology = serde_json::from_str(text)?;
        o.validate()?;
        Ok(o)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn frames_of(&self, lu: &str) -> Result<&BTreeSet<String>> {
        self.lu_to_frames
            .get(lu)
            .ok_or_else(|| Error::unknown("lexical unit", lu))
    }

    pub fn elements_of(&self, frame: &str) -> Result<&BTreeSet<String>> {
        self.frame_to_elements
            .get(frame)
            .ok_or_else(|| Error::unknown("frame", frame))
    }

    /// Frames the lexical unit may evoke, over the frame vocabulary.
    pub fn frame_mask(&self, vocab: &Vocab, lu: &str) -> Result<Vec<bool>> {
        let mut mask = vec![false; vocab.frames.len()];
        for f in self.frames_of(lu)? {
            mask[vocab.frames.require("frame", f)?] = true;
        }
        Ok(mask)
    }

    /// Frame elements admitted by the frame, over the frame-element vocabulary.
    pub fn fe_mask(&self, vocab: &Vocab, frame: &str) -> Result<Vec<bool>> {
        let mut mask = vec![false; vocab.frame_elements.len()];
        for fe in self.elements_of(frame)? {
            mask[vocab.frame_elements.require("frame element", fe)?] = true;
        }
        Ok(mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ontology() -> Ontology {
        Ontology::from_json(
            r#"{"lu_to_frames":{"try.v":["Attempt"],"run.v":["Self_motion","Operating"]},
                "frame_to_elements":{"Attempt":["Agent","Goal"],"Self_motion":["Self_mover","Goal"],
                                     "Operating":["Operator","System","Agent"]}}"#,
        )
        .unwrap()
    }

    #[test]
    fn masks() {
        let o = ontology();
        let v = Vocab::build(&[], &o);
        assert_eq!(v.frame_elements.len(), 5);
        let m = o.frame_mask(&v, "try.v").unwrap();
        assert_eq!(m.iter().filter(|&&b| b).count(), 1);
        assert!(m[v.frames.id("Attempt").unwrap()]);
        let m = o.fe_mask(&v, "Attempt").unwrap();
        assert_eq!(m.iter().filter(|&&b| b).count(), 2);
        assert!(matches!(o.frame_mask(&v, "nope.v"), Err(Error::Unknown { .. })));
        assert!(matches!(o.fe_mask(&v, "Nope"), Err(Error::Unknown { .. })));
    }

    #[test]
    fn masks_match_set_membership() {
        let o = ontology();
        let v = Vocab::build(&[], &o);
        for (lu, frames) in &o.lu_to_frames {
            let m = o.frame_mask(&v, lu).unwrap();
            for (id, name) in v.frames.iter().enumerate() {
                assert_eq!(m[id], frames.contains(name));
            }
            assert!(m.iter().any(|&b| b));
        }
        for (f, fes) in &o.frame_to_elements {
            let m = o.fe_mask(&v, f).unwrap();
            for (id, name) in v.frame_elements.iter().enumerate() {
                assert_eq!(m[id], fes.contains(name));
            }
        }
    }

    #[test]
    fn invalid_ontologies() {
        assert!(Ontology::from_json(r#"{"lu_to_frames":{"a.v":[]},"frame_to_elements":{}}"#).is_err());
        assert!(Ontology::from_json(r#"{"lu_to_frames":{"a.v":["F"]},"frame_to_elements":{}}"#).is_err());
        assert!(Ontology::from_json(r#"{"lu_to_frames":{},"frame_to_elements":{"F":[]}}"#).is_err());
        assert!(Ontology::from_json(r#"{"lu_to_frames":{},"frame_to_elements":{},"x":1}"#).is_err());
    }
}
