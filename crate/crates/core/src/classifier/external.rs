//! Line protocol adapter for an out-of-process model.
//!
//! ```text
//! -> CLASSIFY <item_id> <image_ref>
//! <- RESULT <item_id> <class_code> <p1> <p2> <p3> <p4> <p5> <p6>
//! ```
//!
//! Probabilities are in class-code order. A reply that does not arrive within
//! the timeout, a closed pipe, or a malformed reply all yield
//! [`Classification::Unavailable`].

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use super::{Classification, Classifier, ClassifierError, ClassifyRequest, Prediction};
use crate::domain::{ProfileSet, WasteClass, NUM_CLASSES};
use crate::time::SimTime;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExternalError {
    #[error("malformed reply `{0}`")]
    Malformed(String),
    #[error("reply probabilities invalid: {0}")]
    Probabilities(String),
}

/// Parses `RESULT <item_id> <class_code> <p1..p6>`.
pub fn parse_result_line(line: &str) -> Result<(u64, WasteClass, [f64; NUM_CLASSES]), ExternalError> {
    let malformed = || ExternalError::Malformed(line.to_string());
    let mut parts = line.split_whitespace();
    if parts.next() != Some("RESULT") {
        return Err(malformed());
    }
    let item: u64 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(malformed)?;
    let code: u8 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(malformed)?;
    let class = WasteClass::from_code(code).ok_or_else(malformed)?;
    let mut probs = [0.0; NUM_CLASSES];
    for p in probs.iter_mut() {
        *p = parts.next().and_then(|s| s.parse().ok()).ok_or_else(malformed)?;
    }
    if parts.next().is_some() {
        return Err(malformed());
    }
    Ok((item, class, probs))
}

fn normalize(class: WasteClass, mut probs: [f64; NUM_CLASSES]) -> Result<[f64; NUM_CLASSES], ExternalError> {
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(ExternalError::Probabilities(format!("{probs:?}")));
    }
    let sum: f64 = probs.iter().sum();
    // replies usually carry a few printed decimals
    if (sum - 1.0).abs() > 1e-3 {
        return Err(ExternalError::Probabilities(format!("sum {sum}")));
    }
    probs.iter_mut().for_each(|p| *p /= sum);
    let peak = probs[class.index()];
    if probs.iter().filter(|p| **p >= peak).count() != 1 {
        return Err(ExternalError::Probabilities(format!("class {class} is not the unique argmax")));
    }
    Ok(probs)
}

pub struct ExternalClassifier {
    writer: Box<dyn Write + Send>,
    replies: Receiver<String>,
    timeout: Duration,
    profiles: ProfileSet,
    child: Option<Child>,
}

impl std::fmt::Debug for ExternalClassifier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalClassifier").field("timeout", &self.timeout).finish_non_exhaustive()
    }
}

impl ExternalClassifier {
    /// Wraps an arbitrary byte transport. A background thread reads reply lines.
    pub fn new<R, W>(reader: R, writer: W, timeout: Duration, profiles: ProfileSet) -> Self
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        let (tx, replies) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(reader).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        ExternalClassifier { writer: Box::new(writer), replies, timeout, profiles, child: None }
    }

    /// Starts `program args...` and talks to it over stdin/stdout.
    pub fn spawn(command: &[String], timeout: Duration, profiles: ProfileSet) -> io::Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "empty adapter command"))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut adapter = Self::new(stdout, stdin, timeout, profiles);
        adapter.child = Some(child);
        Ok(adapter)
    }

    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration, profiles: ProfileSet) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        let reader = stream.try_clone()?;
        Ok(Self::new(reader, stream, timeout, profiles))
    }

    fn unavailable(&self, reason: String) -> Classification {
        Classification::Unavailable { latency: SimTime::from_secs_f64(self.timeout.as_secs_f64()), reason }
    }
}

impl Drop for ExternalClassifier {
    fn drop(&mut self) {
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl Classifier for ExternalClassifier {
    fn name(&self) -> String {
        "external".into()
    }

    fn classify(&mut self, request: &ClassifyRequest<'_>) -> Result<Classification, ClassifierError> {
        let line = format!("CLASSIFY {} {}\n", request.item_id, request.image_ref);
        if let Err(e) = self.writer.write_all(line.as_bytes()).and_then(|_| self.writer.flush()) {
            return Ok(self.unavailable(format!("adapter write failed: {e}")));
        }
        let deadline = Instant::now() + self.timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            let reply = match self.replies.recv_timeout(left) {
                Ok(reply) => reply,
                Err(RecvTimeoutError::Timeout) => return Ok(self.unavailable("adapter timeout".into())),
                Err(RecvTimeoutError::Disconnected) => return Ok(self.unavailable("adapter closed".into())),
            };
            let (item, class, probs) = match parse_result_line(&reply) {
                Ok(parsed) => parsed,
                Err(e) => return Ok(self.unavailable(e.to_string())),
            };
            if item != request.item_id {
                // late answer to an earlier, timed-out request
                continue;
            }
            return Ok(match normalize(class, probs) {
                Ok(confidence) => Classification::Predicted(Prediction {
                    predicted: class,
                    confidence,
                    latency: self.profiles.get(request.true_class).latency(),
                }),
                Err(e) => self.unavailable(e.to_string()),
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn parses_reply() {
        let (id, class, p) = parse_result_line("RESULT 12 3 0.01 0.01 0.95 0.01 0.01 0.01").unwrap();
        assert_eq!((id, class), (12, WasteClass::Glass));
        assert_eq!(p[2], 0.95);
        assert!(parse_result_line("RESULT 12 9 0 0 0 0 0 1").is_err());
        assert!(parse_result_line("RESULT 12 3 0.5 0.5").is_err());
        assert!(parse_result_line("RESULTS 12 3 1 0 0 0 0 0").is_err());
        assert!(parse_result_line("RESULT 12 1 1 0 0 0 0 0 0").is_err());
    }

    #[test]
    fn normalize_requires_unique_argmax() {
        assert!(normalize(WasteClass::Plastic, [0.5, 0.5, 0.0, 0.0, 0.0, 0.0]).is_err());
        assert!(normalize(WasteClass::Plastic, [0.9, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
        let p = normalize(WasteClass::Metal, [0.0002, 0.999, 0.0002, 0.0002, 0.0002, 0.0002]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn closed_pipe_is_unavailable() {
        let mut c = ExternalClassifier::new(Cursor::new(Vec::new()), std::io::sink(), Duration::from_secs(1), ProfileSet::default());
        let req = ClassifyRequest { item_id: 1, true_class: WasteClass::Plastic, image_ref: "img" };
        assert!(matches!(c.classify(&req).unwrap(), Classification::Unavailable { .. }));
    }

    #[test]
    fn canned_reply_is_used() {
        let replies = "RESULT 0 6 0 0 0 0 0 1\nRESULT 1 2 0.02 0.9 0.02 0.02 0.02 0.02\n";
        let mut c = ExternalClassifier::new(
            Cursor::new(replies.as_bytes().to_vec()),
            std::io::sink(),
            Duration::from_secs(2),
            ProfileSet::default(),
        );
        let req = ClassifyRequest { item_id: 1, true_class: WasteClass::Glass, image_ref: "img" };
        match c.classify(&req).unwrap() {
            Classification::Predicted(p) => {
                assert_eq!(p.predicted, WasteClass::Metal);
                assert_eq!(p.latency, SimTime::from_secs(6));
                p.check().unwrap();
            }
            other => panic!("{other:?}"),
        }
    }
}
