//! Downlink commands: payload encoding and the delivery state machine.
//!
//! Payload layout (big-endian, first byte is the opcode):
//!
//! | opcode | meaning             | body                         |
//! |--------|---------------------|------------------------------|
//! | `0x01` | set wake-up period  | `u16` minutes                |
//! | `0x02` | time sync           | `i32` clock offset, seconds  |
//!
//! Anything else is a raw payload that devices log and ignore. Payloads are
//! at most [`MAX_PAYLOAD`] bytes.

use serde::{Deserialize, Serialize};

use crate::time::Timestamp;

pub const MAX_PAYLOAD: usize = 51;
pub const OP_SET_WAKEUP_PERIOD: u8 = 0x01;
pub const OP_TIME_SYNC: u8 = 0x02;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DownlinkError {
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD}-byte limit")]
    PayloadTooLarge(usize),
    #[error("unknown command kind {0:?}")]
    UnknownKind(String),
    #[error("bad value: {0}")]
    BadValue(String),
    #[error("illegal transition {from:?} -> {to:?}")]
    IllegalTransition { from: DownlinkState, to: DownlinkState },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownlinkKind {
    SetWakeupPeriod,
    TimeSync,
    Raw,
}

impl DownlinkKind {
    pub fn parse(s: &str) -> Result<Self, DownlinkError> {
        match s {
            "set_wakeup_period" => Ok(DownlinkKind::SetWakeupPeriod),
            "time_sync" => Ok(DownlinkKind::TimeSync),
            "raw" => Ok(DownlinkKind::Raw),
            other => Err(DownlinkError::UnknownKind(other.to_owned())),
        }
    }
}

/// Decoded device command.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeviceCommand {
    SetWakeupPeriod { minutes: u16 },
    TimeSync { offset_secs: i32 },
    Raw(Vec<u8>),
}

impl DeviceCommand {
    pub fn kind(&self) -> DownlinkKind {
        match self {
            DeviceCommand::SetWakeupPeriod { .. } => DownlinkKind::SetWakeupPeriod,
            DeviceCommand::TimeSync { .. } => DownlinkKind::TimeSync,
            DeviceCommand::Raw(_) => DownlinkKind::Raw,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        match self {
            DeviceCommand::SetWakeupPeriod { minutes } => {
                let mut v = vec![OP_SET_WAKEUP_PERIOD];
                v.extend_from_slice(&minutes.to_be_bytes());
                v
            }
            DeviceCommand::TimeSync { offset_secs } => {
                let mut v = vec![OP_TIME_SYNC];
                v.extend_from_slice(&offset_secs.to_be_bytes());
                v
            }
            DeviceCommand::Raw(bytes) => bytes.clone(),
        }
    }

    /// Interprets a payload under the given kind hint.
    pub fn decode(kind: DownlinkKind, payload: &[u8]) -> Result<Self, DownlinkError> {
        if payload.len() > MAX_PAYLOAD {
            return Err(DownlinkError::PayloadTooLarge(payload.len()));
        }
        match kind {
            DownlinkKind::SetWakeupPeriod => match payload {
                [OP_SET_WAKEUP_PERIOD, a, b] => Ok(DeviceCommand::SetWakeupPeriod {
                    minutes: u16::from_be_bytes([*a, *b]),
                }),
                _ => Err(DownlinkError::BadValue("set_wakeup_period payload is 0x01 + u16".into())),
            },
            DownlinkKind::TimeSync => match payload {
                [OP_TIME_SYNC, a, b, c, d] => Ok(DeviceCommand::TimeSync {
                    offset_secs: i32::from_be_bytes([*a, *b, *c, *d]),
                }),
                _ => Err(DownlinkError::BadValue("time_sync payload is 0x02 + i32".into())),
            },
            DownlinkKind::Raw => Ok(DeviceCommand::Raw(payload.to_vec())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownlinkState {
    Pending,
    Sent,
    Acked,
    Failed,
}

impl DownlinkState {
    /// pending → sent → (acked | failed), nothing else.
    pub fn can_advance_to(self, next: DownlinkState) -> bool {
        matches!(
            (self, next),
            (DownlinkState::Pending, DownlinkState::Sent)
                | (DownlinkState::Sent, DownlinkState::Acked)
                | (DownlinkState::Sent, DownlinkState::Failed)
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, DownlinkState::Acked | DownlinkState::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownlinkCommand {
    pub id: u64,
    pub device_id: String,
    pub port: u8,
    /// Raw bytes; base64 at the JSON boundary.
    #[serde(with = "b64")]
    pub payload: Vec<u8>,
    pub kind: DownlinkKind,
    pub state: DownlinkState,
    pub created_at: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sent_at: Option<Timestamp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acked_at: Option<Timestamp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_at: Option<Timestamp>,
}

impl DownlinkCommand {
    pub fn new(
        id: u64,
        device_id: impl Into<String>,
        port: u8,
        kind: DownlinkKind,
        payload: Vec<u8>,
        now: Timestamp,
    ) -> Result<Self, DownlinkError> {
        DeviceCommand::decode(kind, &payload)?;
        Ok(DownlinkCommand {
            id,
            device_id: device_id.into(),
            port,
            payload,
            kind,
            state: DownlinkState::Pending,
            created_at: now,
            sent_at: None,
            acked_at: None,
            failed_at: None,
        })
    }

    pub fn advance(&mut self, next: DownlinkState, at: Timestamp) -> Result<(), DownlinkError> {
        if !self.state.can_advance_to(next) {
            return Err(DownlinkError::IllegalTransition { from: self.state, to: next });
        }
        self.state = next;
        match next {
            DownlinkState::Sent => self.sent_at = Some(at),
            DownlinkState::Acked => self.acked_at = Some(at),
            DownlinkState::Failed => self.failed_at = Some(at),
            DownlinkState::Pending => unreachable!("nothing advances to pending"),
        }
        Ok(())
    }

    pub fn command(&self) -> Result<DeviceCommand, DownlinkError> {
        DeviceCommand::decode(self.kind, &self.payload)
    }
}

mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        STANDARD.decode(text).map_err(serde::de::Error::custom)
    }
}
