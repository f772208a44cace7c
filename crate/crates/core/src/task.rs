use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// The four generation tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskId {
    /// Text-to-image.
    T2I,
    /// Instruction-driven recoloring.
    IE,
    /// 2x super resolution.
    SR,
    /// Object removal.
    IP,
}

/// What a task conditions on besides the noisy latent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditioning {
    Text,
    TextAndImage,
}

impl TaskId {
    pub const ALL: [TaskId; 4] = [TaskId::T2I, TaskId::IE, TaskId::SR, TaskId::IP];
    pub const IMAGE_TASKS: [TaskId; 3] = [TaskId::IE, TaskId::SR, TaskId::IP];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::T2I => "T2I",
            TaskId::IE => "IE",
            TaskId::SR => "SR",
            TaskId::IP => "IP",
        }
    }

    pub fn conditioning(self) -> Conditioning {
        match self {
            TaskId::T2I => Conditioning::Text,
            _ => Conditioning::TextAndImage,
        }
    }

    pub fn image_conditioned(self) -> bool {
        self.conditioning() == Conditioning::TextAndImage
    }

    /// Channel count of this task's input convolution.
    pub fn input_channels(self, latent_channels: usize) -> usize {
        if self.image_conditioned() {
            2 * latent_channels
        } else {
            latent_channels
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::UnknownTask {
                task: s.to_string(),
                registered: list_tasks(&TaskId::ALL),
            })
    }
}

pub fn list_tasks(tasks: &[TaskId]) -> String {
    tasks.iter().map(|t| t.as_str()).collect::<Vec<_>>().join(",")
}

pub fn parse_task_list(s: &str) -> Result<Vec<TaskId>, Error> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trip() {
        for t in TaskId::ALL {
            assert_eq!(t.as_str().parse::<TaskId>().unwrap(), t);
        }
        assert_eq!(parse_task_list("T2I,ie, SR").unwrap(), vec![TaskId::T2I, TaskId::IE, TaskId::SR]);
        let err = "XX".parse::<TaskId>().unwrap_err().to_string();
        assert!(err.contains("T2I,IE,SR,IP"), "{err}");
    }

    #[test]
    fn channel_contract() {
        assert_eq!(TaskId::T2I.input_channels(3), 3);
        for t in TaskId::IMAGE_TASKS {
            assert_eq!(t.input_channels(3), 6);
        }
    }
}
