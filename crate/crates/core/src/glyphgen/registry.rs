use serde::{Deserialize, Serialize};

use super::ScriptSpec;
use crate::error::{MrnError, Result};

pub type GlobalId = u32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptCharset {
    pub script_id: u8,
    /// Global id of each local category.
    pub ids: Vec<GlobalId>,
}

/// Authoritative `(script, local index) -> global id` mapping. The first
/// `shared` local categories of every script alias the same global ids
/// `0..shared`; the remaining ids are allocated script by script in ascending
/// `script_id` order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharsetRegistry {
    pub shared: usize,
    pub scripts: Vec<ScriptCharset>,
    pub num_ids: usize,
}

impl CharsetRegistry {
    pub fn new(specs: &[ScriptSpec], shared: usize) -> Result<Self> {
        let mut order: Vec<&ScriptSpec> = specs.iter().collect();
        order.sort_by_key(|s| s.script_id);
        if order.windows(2).any(|w| w[0].script_id == w[1].script_id) {
            return Err(MrnError::Registry("duplicate script id".into()));
        }
        let mut next = shared as GlobalId;
        let mut scripts = Vec::with_capacity(order.len());
        for spec in order {
            let ids = (0..spec.charset_size)
                .map(|k| {
                    if k < shared {
                        k as GlobalId
                    } else {
                        next += 1;
                        next - 1
                    }
                })
                .collect();
            scripts.push(ScriptCharset {
                script_id: spec.script_id,
                ids,
            });
        }
        Ok(CharsetRegistry {
            shared,
            scripts,
            num_ids: next as usize,
        })
    }

    pub fn charset(&self, script_id: u8) -> Result<&[GlobalId]> {
        self.scripts
            .iter()
            .find(|s| s.script_id == script_id)
            .map(|s| s.ids.as_slice())
            .ok_or_else(|| MrnError::Registry(format!("unknown script {script_id}")))
    }

    pub fn global_id(&self, script_id: u8, local: usize) -> Result<GlobalId> {
        self.charset(script_id)?
            .get(local)
            .copied()
            .ok_or_else(|| MrnError::Registry(format!("script {script_id} has no local category {local}")))
    }

    pub fn contains(&self, id: GlobalId) -> bool {
        (id as usize) < self.num_ids
    }
}
