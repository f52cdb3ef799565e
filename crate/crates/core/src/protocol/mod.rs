//! Device and agent state machines for the two key flows, plus the shared
//! wire grammar.

pub mod agent;
pub mod device;
pub mod wire;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// One protocol run type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flow {
    /// Product key to first agent key.
    AkInit,
    /// Agent key to a fresh agent key.
    AkRotate,
    /// Cloud key issue or replacement under the agent key.
    CkUpdate,
}

impl Flow {
    pub const ALL: [Flow; 3] = [Flow::AkInit, Flow::AkRotate, Flow::CkUpdate];

    pub fn name(self) -> &'static str {
        match self {
            Flow::AkInit => "ak_init",
            Flow::AkRotate => "ak_rotate",
            Flow::CkUpdate => "ck_update",
        }
    }
}

impl fmt::Display for Flow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Flow {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "ak_init" | "init" => Ok(Flow::AkInit),
            "ak_rotate" | "rotate" => Ok(Flow::AkRotate),
            "ck_update" | "update" => Ok(Flow::CkUpdate),
            other => Err(format!("unknown flow `{other}` (expected ak_init, ak_rotate or ck_update)")),
        }
    }
}
