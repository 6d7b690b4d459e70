//! Versioned JSON-lines messages exchanged with operator clients.
//!
//! Every message is one JSON object carrying `"v":1`. Over raw TCP each
//! message is one line; over WebSocket each message is one text frame.
//! The full schema is described in `docs/wire-protocol.md`.

use serde::Serialize;
use serde_json::{Map, Value};

use convowaste_core::domain::BinIndex;
use convowaste_core::sim::{SimCommand, SimEvent, SimMetrics, StatusSnapshot};
use convowaste_core::SimTime;

pub const WIRE_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorCode {
    BadCommand,
    UnknownBin,
    NotRunning,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireError {
    pub code: ErrorCode,
    pub message: String,
}

impl WireError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        WireError { code, message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Dump(BinIndex),
    Pause,
    Resume,
    Status,
    Subscribe,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Dump(_) => "dump",
            Command::Pause => "pause",
            Command::Resume => "resume",
            Command::Status => "status",
            Command::Subscribe => "subscribe",
        }
    }

    /// The simulator command, for the ones that change machine state.
    pub fn sim_command(self) -> Option<SimCommand> {
        match self {
            Command::Dump(bin) => Some(SimCommand::Dump { bin }),
            Command::Pause => Some(SimCommand::Pause),
            Command::Resume => Some(SimCommand::Resume),
            Command::Status | Command::Subscribe => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    /// Opaque correlation id, echoed in the reply.
    pub id: Option<Value>,
    pub command: Command,
}

/// Parses one client message. On failure the id (if it could be read) is
/// returned with the error so the reply can still be correlated.
pub fn parse_request(text: &str) -> Result<Request, (Option<Value>, WireError)> {
    let bad = |id: &Option<Value>, msg: String| (id.clone(), WireError::new(ErrorCode::BadCommand, msg));
    let value: Value = serde_json::from_str(text).map_err(|e| bad(&None, format!("not JSON: {e}")))?;
    let Value::Object(mut obj) = value else {
        return Err(bad(&None, "message must be a JSON object".into()));
    };
    let id = obj.remove("id");
    match obj.remove("v") {
        Some(Value::Number(n)) if n.as_u64() == Some(WIRE_VERSION) => {}
        Some(other) => return Err(bad(&id, format!("unsupported version {other}"))),
        None => return Err(bad(&id, "missing \"v\"".into())),
    }
    let cmd = match obj.remove("cmd") {
        Some(Value::String(s)) => s,
        Some(_) => return Err(bad(&id, "\"cmd\" must be a string".into())),
        None => return Err(bad(&id, "missing \"cmd\"".into())),
    };
    let command = match cmd.as_str() {
        "dump" => {
            let bin = take_bin(&mut obj).map_err(|e| (id.clone(), e))?;
            Command::Dump(bin)
        }
        "pause" => Command::Pause,
        "resume" => Command::Resume,
        "status" => Command::Status,
        "subscribe" => Command::Subscribe,
        other => return Err(bad(&id, format!("unknown command {other:?}"))),
    };
    if let Some(key) = obj.keys().next() {
        return Err(bad(&id, format!("unexpected field {key:?} for {cmd}")));
    }
    Ok(Request { id, command })
}

fn take_bin(obj: &mut Map<String, Value>) -> Result<BinIndex, WireError> {
    let bad = |m: &str| WireError::new(ErrorCode::BadCommand, m);
    let n = match obj.remove("bin") {
        Some(Value::Number(n)) => n.as_i64().ok_or_else(|| bad("\"bin\" must be an integer"))?,
        Some(_) => return Err(bad("\"bin\" must be an integer")),
        None => return Err(bad("dump needs \"bin\"")),
    };
    u8::try_from(n)
        .ok()
        .and_then(BinIndex::new)
        .ok_or_else(|| WireError::new(ErrorCode::UnknownBin, format!("no bin {n}; bins are 1..6")))
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Reply {
    Hello {
        mode: &'static str,
        machine_id: String,
        speed: f64,
    },
    Ack {
        #[serde(skip_serializing_if = "Option::is_none")]
        id: Option<Value>,
        cmd: &'static str,
        /// Sequence number of the event the command produced.
        seq: Option<u64>,
        sim_time: SimTime,
    },
    Status {
        #[serde(skip_serializing_if = "Option::is_none")]
        id: Option<Value>,
        snapshot: StatusSnapshot,
    },
    Error {
        #[serde(skip_serializing_if = "Option::is_none")]
        id: Option<Value>,
        code: ErrorCode,
        message: String,
    },
    Event {
        event: SimEvent,
    },
    Snapshot {
        snapshot: StatusSnapshot,
    },
    Finished {
        sim_time: SimTime,
        metrics: SimMetrics,
    },
}

#[derive(Serialize)]
struct Envelope<'a> {
    v: u64,
    #[serde(flatten)]
    body: &'a Reply,
}

impl Reply {
    pub fn error(id: Option<Value>, e: WireError) -> Reply {
        Reply::Error { id, code: e.code, message: e.message }
    }

    /// One JSON object, no trailing newline.
    pub fn encode(&self) -> String {
        serde_json::to_string(&Envelope { v: WIRE_VERSION, body: self }).expect("replies always serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_commands() {
        let r = parse_request(r#"{"v":1,"id":7,"cmd":"dump","bin":3}"#).unwrap();
        assert_eq!(r.command, Command::Dump(BinIndex::new(3).unwrap()));
        assert_eq!(r.id, Some(Value::from(7)));
        for (text, cmd) in [
            (r#"{"v":1,"cmd":"pause"}"#, Command::Pause),
            (r#"{"cmd":"resume","v":1}"#, Command::Resume),
            (r#"{"v":1,"cmd":"status","id":"abc"}"#, Command::Status),
            (r#"{"v":1,"cmd":"subscribe"}"#, Command::Subscribe),
        ] {
            assert_eq!(parse_request(text).unwrap().command, cmd);
        }
    }

    #[test]
    fn bin_out_of_range_is_unknown_bin() {
        for bin in ["7", "0", "-1", "300"] {
            let (id, e) = parse_request(&format!(r#"{{"v":1,"id":1,"cmd":"dump","bin":{bin}}}"#)).unwrap_err();
            assert_eq!((id, e.code), (Some(Value::from(1)), ErrorCode::UnknownBin), "{bin}");
        }
    }

    #[test]
    fn schema_violations_are_bad_command() {
        for text in [
            "nonsense",
            "[1]",
            r#"{"cmd":"pause"}"#,
            r#"{"v":2,"cmd":"pause"}"#,
            r#"{"v":1}"#,
            r#"{"v":1,"cmd":"explode"}"#,
            r#"{"v":1,"cmd":"dump"}"#,
            r#"{"v":1,"cmd":"dump","bin":"3"}"#,
            r#"{"v":1,"cmd":"dump","bin":2.5}"#,
            r#"{"v":1,"cmd":"pause","bin":1}"#,
        ] {
            assert_eq!(parse_request(text).unwrap_err().1.code, ErrorCode::BadCommand, "{text}");
        }
    }

    #[test]
    fn replies_carry_version_and_type() {
        let r = Reply::error(Some(Value::from(3)), WireError::new(ErrorCode::UnknownBin, "no bin 7"));
        assert_eq!(r.encode(), r#"{"v":1,"type":"error","id":3,"code":"unknown-bin","message":"no bin 7"}"#);
        let ack = Reply::Ack { id: None, cmd: "pause", seq: Some(12), sim_time: SimTime::from_secs(4) };
        assert_eq!(ack.encode(), r#"{"v":1,"type":"ack","cmd":"pause","seq":12,"sim_time":"4.000000"}"#);
    }
}
