use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{contract, MrnError, Result};
use crate::glyphgen::GlobalId;

pub const BLANK: usize = 0;

/// Union label space `C̃_i` of every charset seen so far. Index 0 is the CTC
/// blank; entry `j` lives at union index `j + 1`. Entries are append-only, so
/// a character keeps its union index across incremental steps.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "RawUnion", into = "RawUnion")]
pub struct UnionCharset {
    entries: Vec<GlobalId>,
    index: HashMap<GlobalId, usize>,
    languages: BTreeMap<u8, BTreeSet<GlobalId>>,
}

#[derive(Clone, Serialize, Deserialize)]
struct RawUnion {
    entries: Vec<GlobalId>,
    languages: BTreeMap<u8, BTreeSet<GlobalId>>,
}

impl From<RawUnion> for UnionCharset {
    fn from(raw: RawUnion) -> Self {
        let index = raw.entries.iter().enumerate().map(|(j, &id)| (id, j + 1)).collect();
        UnionCharset {
            entries: raw.entries,
            index,
            languages: raw.languages,
        }
    }
}

impl From<UnionCharset> for RawUnion {
    fn from(u: UnionCharset) -> Self {
        RawUnion {
            entries: u.entries,
            languages: u.languages,
        }
    }
}

impl UnionCharset {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `language` with `charset`, appending ids not yet present.
    pub fn extend(&mut self, language: u8, charset: &[GlobalId]) -> Result<()> {
        if charset.is_empty() {
            return Err(contract(format!("language {language}: empty charset")));
        }
        for &id in charset {
            if !self.index.contains_key(&id) {
                self.entries.push(id);
                self.index.insert(id, self.entries.len());
            }
        }
        self.languages.entry(language).or_default().extend(charset.iter().copied());
        Ok(())
    }

    pub fn entries(&self) -> &[GlobalId] {
        &self.entries
    }

    /// Classifier width: entries plus blank.
    pub fn width(&self) -> usize {
        self.entries.len() + 1
    }

    pub fn index_of(&self, id: GlobalId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn global_at(&self, union_index: usize) -> Option<GlobalId> {
        union_index.checked_sub(1).and_then(|j| self.entries.get(j)).copied()
    }

    pub fn languages(&self) -> impl Iterator<Item = u8> + '_ {
        self.languages.keys().copied()
    }

    pub fn charset_of(&self, language: u8) -> Option<&BTreeSet<GlobalId>> {
        self.languages.get(&language)
    }

    /// Boolean mask over union indices marking blank plus `language`'s charset.
    pub fn mask(&self, language: u8) -> Result<Vec<bool>> {
        let set = self
            .languages
            .get(&language)
            .ok_or_else(|| MrnError::Registry(format!("language {language} not in the union")))?;
        let mut m = vec![false; self.width()];
        m[BLANK] = true;
        for id in set {
            m[self.index[id]] = true;
        }
        Ok(m)
    }

    /// Mask with every entry enabled.
    pub fn full_mask(&self) -> Vec<bool> {
        vec![true; self.width()]
    }

    /// Union indices of a global label sequence.
    pub fn encode(&self, labels: &[GlobalId]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|&l| {
                self.index_of(l)
                    .ok_or_else(|| MrnError::Registry(format!("character {l} not in the union")))
            })
            .collect()
    }

    pub fn decode(&self, indices: &[usize]) -> Result<Vec<GlobalId>> {
        indices
            .iter()
            .map(|&i| {
                self.global_at(i)
                    .ok_or_else(|| MrnError::Registry(format!("union index {i} has no character")))
            })
            .collect()
    }
}
