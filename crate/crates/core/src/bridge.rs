//! Out-of-process controllers over line-delimited JSON on stdio.
//!
//! Protocol v1, one object per line, strictly alternating:
//!
//! | bridge sends                                   | client replies                  |
//! |------------------------------------------------|---------------------------------|
//! | `{"type":"init","dt":<dt_c>,"protocol":1}`     | `{"type":"ready"}`              |
//! | `{"type":"step","t":<t>,"r":<r>,"y":<y_m>}`    | `{"type":"u","value":<number>}` |
//! | `{"type":"reset"}`                             | `{"type":"ack"}`                |
//! | `{"type":"shutdown"}`                          | (exits)                         |
//!
//! A client may answer any request with `{"type":"error","message":...}`.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::controllers::{Controller, ControllerError, ControllerInput};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("invalid bridge configuration: {0}")]
    Config(String),
    #[error("failed to launch `{command}`: {source}")]
    Launch {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("no reply to `{request}` within {timeout_s} s")]
    Timeout {
        request: &'static str,
        timeout_s: f64,
    },
    #[error("protocol error on reply to `{request}`: {reason}; offending line: {line:?}")]
    Protocol {
        request: &'static str,
        line: String,
        reason: String,
    },
    #[error("client rejected protocol {requested}: {message}")]
    VersionMismatch { requested: u32, message: String },
    #[error("client reported an error on `{request}`: {message}")]
    Client {
        request: &'static str,
        message: String,
    },
    #[error("client returned non-finite control value `{0}`")]
    NonFinite(String),
    #[error("bridge is broken: {0}")]
    Broken(String),
}

fn default_handshake_timeout() -> f64 {
    10.0
}
fn default_step_timeout() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeConfig {
    /// Program followed by its arguments.
    pub command: Vec<String>,
    pub dt_c: f64,
    #[serde(default = "default_handshake_timeout")]
    pub handshake_timeout: f64,
    #[serde(default = "default_step_timeout")]
    pub step_timeout: f64,
}

impl BridgeConfig {
    pub fn new(command: Vec<String>, dt_c: f64) -> Self {
        Self {
            command,
            dt_c,
            handshake_timeout: default_handshake_timeout(),
            step_timeout: default_step_timeout(),
        }
    }

    /// Split a command line on whitespace. No shell quoting is interpreted.
    pub fn from_command_line(cmd: &str, dt_c: f64) -> Self {
        Self::new(cmd.split_whitespace().map(str::to_string).collect(), dt_c)
    }

    pub fn validate(&self) -> Result<(), BridgeError> {
        if self.command.is_empty() {
            return Err(BridgeError::Config("empty command".into()));
        }
        for (name, v) in [
            ("dt_c", self.dt_c),
            ("handshake_timeout", self.handshake_timeout),
            ("step_timeout", self.step_timeout),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(BridgeError::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Round-trip exact number formatting (17 significant digits).
pub fn wire_number(v: f64) -> String {
    format!("{v:.16e}")
}

/// Per-step wall-clock latency.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub steps: u64,
    pub total_s: f64,
    pub max_s: f64,
}

impl LatencyStats {
    pub fn record(&mut self, d: Duration) {
        let s = d.as_secs_f64();
        self.steps += 1;
        self.total_s += s;
        self.max_s = self.max_s.max(s);
    }

    pub fn mean_s(&self) -> Option<f64> {
        (self.steps > 0).then(|| self.total_s / self.steps as f64)
    }
}

enum Line {
    Text(String),
    Failed(String),
}

/// A live child process speaking protocol v1.
pub struct Bridge {
    cfg: BridgeConfig,
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<Line>,
    broken: Option<String>,
    closed: bool,
    latency: LatencyStats,
}

impl std::fmt::Debug for Bridge {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Bridge")
            .field("command", &self.cfg.command)
            .field("pid", &self.child.id())
            .field("broken", &self.broken)
            .finish()
    }
}

impl Bridge {
    /// Launch the child without handshaking.
    pub fn spawn(cfg: BridgeConfig) -> Result<Self, BridgeError> {
        cfg.validate()?;
        let mut child = Command::new(&cfg.command[0])
            .args(&cfg.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|source| BridgeError::Launch {
                command: cfg.command.join(" "),
                source,
            })?;
        let stdin = child.stdin.take();
        let stdout = child.stdout.take().expect("stdout is piped");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let msg = match line {
                    Ok(l) => Line::Text(l),
                    Err(e) => Line::Failed(e.to_string()),
                };
                if tx.send(msg).is_err() {
                    break;
                }
            }
        });
        Ok(Self {
            cfg,
            child,
            stdin,
            lines: rx,
            broken: None,
            closed: false,
            latency: LatencyStats::default(),
        })
    }

    /// Launch and complete the v1 handshake.
    pub fn connect(cfg: BridgeConfig) -> Result<Self, BridgeError> {
        let mut b = Self::spawn(cfg)?;
        b.handshake_with(PROTOCOL_VERSION)?;
        Ok(b)
    }

    pub fn config(&self) -> &BridgeConfig {
        &self.cfg
    }

    pub fn latency(&self) -> LatencyStats {
        self.latency
    }

    /// Send `init` announcing `version`. Exposed so that version negotiation
    /// failures can be exercised.
    pub fn handshake_with(&mut self, version: u32) -> Result<(), BridgeError> {
        let msg = format!(
            r#"{{"type":"init","dt":{},"protocol":{version}}}"#,
            wire_number(self.cfg.dt_c)
        );
        let timeout = self.cfg.handshake_timeout;
        match self.request("init", &msg, timeout) {
            Ok(reply) => expect_type("init", &reply, "ready").map(|_| ()),
            Err(BridgeError::Client { message, .. }) => {
                self.mark_broken("client rejected init");
                Err(BridgeError::VersionMismatch {
                    requested: version,
                    message,
                })
            }
            Err(e) => Err(e),
        }
    }

    pub fn step(&mut self, t: f64, r: f64, y: f64) -> Result<f64, BridgeError> {
        let msg = format!(
            r#"{{"type":"step","t":{},"r":{},"y":{}}}"#,
            wire_number(t),
            wire_number(r),
            wire_number(y)
        );
        let started = Instant::now();
        let reply = self.request("step", &msg, self.cfg.step_timeout)?;
        self.latency.record(started.elapsed());
        let (line, obj) = expect_type("step", &reply, "u")?;
        let value = match obj.get("value") {
            Some(Value::Number(n)) => n
                .as_f64()
                .ok_or_else(|| BridgeError::NonFinite(n.to_string()))?,
            Some(Value::String(s)) if s.trim().parse::<f64>().is_ok_and(|v| !v.is_finite()) => {
                return Err(self.fail(BridgeError::NonFinite(s.clone())));
            }
            _ => {
                let err = BridgeError::Protocol {
                    request: "step",
                    line,
                    reason: "`value` must be a number".into(),
                };
                return Err(self.fail(err));
            }
        };
        if !value.is_finite() {
            return Err(self.fail(BridgeError::NonFinite(value.to_string())));
        }
        Ok(value)
    }

    pub fn reset(&mut self) -> Result<(), BridgeError> {
        let reply = self.request("reset", r#"{"type":"reset"}"#, self.cfg.step_timeout)?;
        expect_type("reset", &reply, "ack").map(|_| ())
    }

    /// Ask the child to exit, kill it if it lingers, and reap it.
    /// Calling this more than once is a no-op.
    pub fn shutdown(&mut self) -> Result<(), BridgeError> {
        if self.closed {
            return Ok(());
        }
        self.closed = true;
        if let Some(mut stdin) = self.stdin.take() {
            let _ = stdin
                .write_all(b"{\"type\":\"shutdown\"}\n")
                .and_then(|_| stdin.flush());
        }
        let deadline = Instant::now() + Duration::from_secs_f64(self.cfg.step_timeout);
        loop {
            match self.child.try_wait() {
                Ok(Some(_)) => return Ok(()),
                Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(5)),
                _ => {
                    let _ = self.child.kill();
                    let _ = self.child.wait();
                    return Err(BridgeError::Timeout {
                        request: "shutdown",
                        timeout_s: self.cfg.step_timeout,
                    });
                }
            }
        }
    }

    fn request(
        &mut self,
        request: &'static str,
        msg: &str,
        timeout_s: f64,
    ) -> Result<Value, BridgeError> {
        if let Some(why) = &self.broken {
            return Err(BridgeError::Broken(why.clone()));
        }
        if self.closed {
            return Err(BridgeError::Broken("bridge was shut down".into()));
        }
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| BridgeError::Broken("stdin closed".into()))?;
        if let Err(e) = stdin
            .write_all(msg.as_bytes())
            .and_then(|_| stdin.write_all(b"\n"))
            .and_then(|_| stdin.flush())
        {
            return Err(self.fail(BridgeError::Broken(format!("write failed: {e}"))));
        }
        let line = match self.lines.recv_timeout(Duration::from_secs_f64(timeout_s)) {
            Ok(Line::Text(l)) => l,
            Ok(Line::Failed(e)) => {
                return Err(self.fail(BridgeError::Broken(format!("read failed: {e}"))))
            }
            Err(RecvTimeoutError::Timeout) => {
                return Err(self.fail(BridgeError::Timeout { request, timeout_s }))
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(self.fail(BridgeError::Broken("client closed its output".into())));
            }
        };
        let value: Value = match serde_json::from_str(&line) {
            Ok(v @ Value::Object(_)) => v,
            Ok(_) => return Err(self.fail(protocol(request, &line, "reply is not a JSON object"))),
            Err(e) => return Err(self.fail(protocol(request, &line, &e.to_string()))),
        };
        if value.get("type").and_then(Value::as_str) == Some("error") {
            let message = value
                .get("message")
                .and_then(Value::as_str)
                .unwrap_or("")
                .to_string();
            return Err(BridgeError::Client { request, message });
        }
        Ok(value)
    }

    fn mark_broken(&mut self, why: &str) {
        if self.broken.is_none() {
            self.broken = Some(why.to_string());
        }
        let _ = self.child.kill();
    }

    fn fail(&mut self, err: BridgeError) -> BridgeError {
        self.mark_broken(&err.to_string());
        err
    }
}

impl Drop for Bridge {
    fn drop(&mut self) {
        if self.broken.is_some() {
            self.closed = true;
            let _ = self.child.kill();
            let _ = self.child.wait();
        } else {
            let _ = self.shutdown();
        }
    }
}

fn protocol(request: &'static str, line: &str, reason: &str) -> BridgeError {
    BridgeError::Protocol {
        request,
        line: line.to_string(),
        reason: reason.to_string(),
    }
}

fn expect_type<'a>(
    request: &'static str,
    reply: &'a Value,
    want: &str,
) -> Result<(String, &'a Value), BridgeError> {
    let line = reply.to_string();
    match reply.get("type").and_then(Value::as_str) {
        Some(t) if t == want => Ok((line, reply)),
        Some(t) => Err(protocol(
            request,
            &line,
            &format!("expected type `{want}`, got `{t}`"),
        )),
        None => Err(protocol(request, &line, "missing `type`")),
    }
}

/// A bridge behind the [`Controller`] interface.
#[derive(Debug)]
pub struct BridgedController {
    name: String,
    bridge: Bridge,
}

impl BridgedController {
    pub fn launch(name: &str, cfg: BridgeConfig) -> Result<Self, BridgeError> {
        Ok(Self {
            name: name.to_string(),
            bridge: Bridge::connect(cfg)?,
        })
    }

    pub fn bridge(&mut self) -> &mut Bridge {
        &mut self.bridge
    }
}

impl Controller for BridgedController {
    fn name(&self) -> &str {
        &self.name
    }

    fn rate(&self) -> f64 {
        self.bridge.cfg.dt_c
    }

    fn reset(&mut self) -> Result<(), ControllerError> {
        Ok(self.bridge.reset()?)
    }

    fn step(&mut self, input: &ControllerInput) -> Result<f64, ControllerError> {
        Ok(self.bridge.step(input.t, input.r, input.y_m)?)
    }

    fn mean_step_latency(&self) -> Option<f64> {
        self.bridge.latency.mean_s()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_numbers_round_trip() {
        for v in [
            0.0,
            -0.0,
            1.0,
            0.1,
            -2.5e-300,
            6.02214076e23,
            std::f64::consts::PI,
        ] {
            let s = wire_number(v);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits(), "{s}");
            let j: Value = serde_json::from_str(&s).unwrap();
            assert_eq!(j.as_f64().unwrap(), v);
        }
        assert_eq!(wire_number(0.01), "1.0000000000000000e-2");
    }

    #[test]
    fn config_validation() {
        assert!(BridgeConfig::new(vec![], 0.01).validate().is_err());
        let mut c = BridgeConfig::from_command_line("python3  client.py --pd", 0.01);
        assert_eq!(c.command, ["python3", "client.py", "--pd"]);
        assert!(c.validate().is_ok());
        c.step_timeout = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn launch_failure_is_distinct() {
        let cfg = BridgeConfig::new(vec!["/nonexistent/ctrlbench-no-such-binary".into()], 0.01);
        assert!(matches!(
            Bridge::connect(cfg),
            Err(BridgeError::Launch { .. })
        ));
    }

    #[test]
    fn latency_stats() {
        let mut s = LatencyStats::default();
        assert_eq!(s.mean_s(), None);
        s.record(Duration::from_millis(2));
        s.record(Duration::from_millis(4));
        assert!((s.mean_s().unwrap() - 0.003).abs() < 1e-12);
        assert!((s.max_s - 0.004).abs() < 1e-12);
    }
}
