//! Bundled study specifications.
//!
//! Each fixture is a spec TOML plus an optional human baseline CSV. They are
//! embedded in the binary so `replicate` works from any directory.

use std::path::{Path, PathBuf};

use crate::design::{DesignError, SpecSource};

#[derive(Debug, Clone, Copy)]
pub struct Fixture {
    pub name: &'static str,
    pub spec: &'static str,
    pub baseline: Option<&'static str>,
}

pub const STUDY1: Fixture = Fixture {
    name: "study1",
    spec: include_str!("../fixtures/study1/spec.toml"),
    baseline: Some(include_str!("../fixtures/study1/baseline.csv")),
};

pub const STUDY2: Fixture = Fixture {
    name: "study2",
    spec: include_str!("../fixtures/study2/spec.toml"),
    baseline: Some(include_str!("../fixtures/study2/baseline.csv")),
};

pub const STUDY3: Fixture = Fixture {
    name: "study3",
    spec: include_str!("../fixtures/study3/spec.toml"),
    baseline: None,
};

pub const ALL: [Fixture; 3] = [STUDY1, STUDY2, STUDY3];

/// Accepts `study1` or `fixtures/study1`.
pub fn by_name(name: &str) -> Option<Fixture> {
    let key = name.trim_end_matches('/').trim_start_matches("fixtures/");
    ALL.into_iter().find(|f| f.name == key)
}

impl Fixture {
    pub fn source(&self) -> Result<SpecSource, DesignError> {
        SpecSource::parse(self.spec.as_bytes().to_vec(), None, &format!("fixtures/{}/spec.toml", self.name))
    }

    /// Writes the spec and baseline into `dir` and returns the spec path.
    pub fn materialize(&self, dir: &Path) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let spec = dir.join("spec.toml");
        std::fs::write(&spec, self.spec)?;
        if let Some(b) = self.baseline {
            std::fs::write(dir.join("baseline.csv"), b)?;
        }
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_fixtures_validate() {
        for f in ALL {
            let src = f.source().unwrap();
            src.spec.validate().unwrap();
        }
        assert_eq!(by_name("fixtures/study2").unwrap().name, "study2");
        assert!(by_name("study9").is_none());
    }
}
