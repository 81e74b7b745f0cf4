use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{MrnError, Result};
use crate::glyphgen::{GlobalId, TaskDataset, TextInstance};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub step: usize,
    /// 1-based task position in the schedule.
    pub task: usize,
    pub split: Split,
    pub purpose: String,
    pub allowed: bool,
}

/// Task datasets behind an access log. At step `i`, training reads of task
/// `k < i` are violations; old data reaches training only through the
/// rehearsal memory.
#[derive(Debug)]
pub struct DataVault {
    tasks: Vec<TaskDataset>,
    log: Mutex<Vec<AuditEvent>>,
}

impl DataVault {
    /// `tasks` in schedule order.
    pub fn new(tasks: Vec<TaskDataset>) -> Self {
        DataVault {
            tasks,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    fn record(&self, step: usize, task: usize, split: Split, purpose: &str, allowed: bool) -> Result<()> {
        self.log.lock().expect("audit log poisoned").push(AuditEvent {
            step,
            task,
            split,
            purpose: purpose.to_string(),
            allowed,
        });
        if allowed {
            Ok(())
        } else {
            Err(MrnError::Audit(format!(
                "step {step} tried to read {split:?} data of task {task} for {purpose}"
            )))
        }
    }

    /// Training split of task `task`, readable only at its own step.
    pub fn train(&self, step: usize, task: usize, purpose: &str) -> Result<&[TextInstance]> {
        self.record(step, task, Split::Train, purpose, task == step)?;
        Ok(&self.tasks[task - 1].train)
    }

    /// Every training split; only the joint reference model may ask.
    pub fn train_joint(&self, purpose: &str) -> Vec<&[TextInstance]> {
        let n = self.tasks.len();
        (1..=n)
            .map(|k| {
                self.record(n, k, Split::Train, purpose, true).expect("joint access is allowed");
                &self.tasks[k - 1].train[..]
            })
            .collect()
    }

    /// Test split of a task already seen at `step`.
    pub fn test(&self, step: usize, task: usize) -> Result<&[TextInstance]> {
        self.record(step, task, Split::Test, "evaluation", task <= step)?;
        Ok(&self.tasks[task - 1].test)
    }

    pub fn script_id(&self, task: usize) -> u8 {
        self.tasks[task - 1].script_id
    }

    pub fn charset(&self, task: usize) -> &[GlobalId] {
        &self.tasks[task - 1].charset
    }

    pub fn log(&self) -> Vec<AuditEvent> {
        self.log.lock().expect("audit log poisoned").clone()
    }

    pub fn violations(&self) -> usize {
        self.log().iter().filter(|e| !e.allowed).count()
    }
}
