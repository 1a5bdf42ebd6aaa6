//! Stand-in bridge client used by the test suites.
//!
//! ```text
//! ctrlbench-policy-fixture pd [--kp K] [--kd K] [--tau T] [--reverse]
//! ctrlbench-policy-fixture record <path>
//! ctrlbench-policy-fixture garbage|nan|hang|reject-protocol|exit-early
//! ```

use std::io::{self, BufRead, Write};
use std::process::ExitCode;

use ctrlbench::bridge::PROTOCOL_VERSION;
use ctrlbench::controllers::{Action, Controller, ControllerInput, Pid, PidConfig};
use serde_json::{json, Value};

enum Mode {
    Pd(PidConfig),
    Record(std::fs::File),
    Garbage,
    Nan,
    Hang,
    RejectProtocol,
    ExitEarly,
}

fn parse_args() -> Result<Mode, String> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mode = args.first().ok_or("missing mode")?;
    match mode.as_str() {
        "pd" => {
            let mut cfg = PidConfig::pd(6.0, 4.0);
            let mut it = args[1..].iter();
            while let Some(flag) = it.next() {
                let mut num = || -> Result<f64, String> {
                    it.next()
                        .ok_or(format!("{flag} needs a value"))?
                        .parse()
                        .map_err(|e| format!("{flag}: {e}"))
                };
                match flag.as_str() {
                    "--kp" => cfg.kp = num()?,
                    "--kd" => cfg.kd = num()?,
                    "--tau" => cfg.deriv_filter_tau = num()?,
                    "--reverse" => cfg.action = Action::Reverse,
                    other => return Err(format!("unknown flag {other}")),
                }
            }
            Ok(Mode::Pd(cfg))
        }
        "record" => {
            let path = args.get(1).ok_or("record needs a path")?;
            Ok(Mode::Record(
                std::fs::File::create(path).map_err(|e| e.to_string())?,
            ))
        }
        "garbage" => Ok(Mode::Garbage),
        "nan" => Ok(Mode::Nan),
        "hang" => Ok(Mode::Hang),
        "reject-protocol" => Ok(Mode::RejectProtocol),
        "exit-early" => Ok(Mode::ExitEarly),
        other => Err(format!("unknown mode {other}")),
    }
}

fn num(v: &Value, key: &str) -> Result<f64, String> {
    v.get(key)
        .and_then(Value::as_f64)
        .ok_or(format!("missing number `{key}`"))
}

fn main() -> ExitCode {
    let mut mode = match parse_args() {
        Ok(m) => m,
        Err(e) => {
            eprintln!("policy-fixture: {e}");
            return ExitCode::from(2);
        }
    };
    let stdin = io::stdin();
    let mut out = io::stdout().lock();
    let mut pid: Option<Pid> = None;
    let reply = |out: &mut io::StdoutLock, s: String| {
        out.write_all(s.as_bytes())
            .and_then(|_| out.write_all(b"\n"))
            .and_then(|_| out.flush())
    };

    for line in stdin.lock().lines() {
        let Ok(line) = line else { break };
        if let Mode::Record(f) = &mut mode {
            let _ = writeln!(f, "{line}");
        }
        let msg: Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                let _ = reply(
                    &mut out,
                    json!({"type": "error", "message": e.to_string()}).to_string(),
                );
                continue;
            }
        };
        let kind = msg.get("type").and_then(Value::as_str).unwrap_or("");
        let answer = match kind {
            "init" => {
                let protocol = msg.get("protocol").and_then(Value::as_u64);
                if matches!(mode, Mode::RejectProtocol) || protocol != Some(PROTOCOL_VERSION as u64)
                {
                    json!({"type": "error", "message": format!("unsupported protocol {protocol:?}")}).to_string()
                } else {
                    if let Mode::Pd(cfg) = &mode {
                        let dt = match num(&msg, "dt") {
                            Ok(dt) => dt,
                            Err(e) => {
                                let _ = reply(
                                    &mut out,
                                    json!({"type": "error", "message": e}).to_string(),
                                );
                                continue;
                            }
                        };
                        match Pid::new("fixture", cfg.clone(), dt) {
                            Ok(p) => pid = Some(p),
                            Err(e) => {
                                let _ = reply(
                                    &mut out,
                                    json!({"type": "error", "message": e.to_string()}).to_string(),
                                );
                                continue;
                            }
                        }
                    }
                    r#"{"type":"ready"}"#.to_string()
                }
            }
            "reset" => {
                if let Some(p) = pid.as_mut() {
                    let _ = p.reset();
                }
                r#"{"type":"ack"}"#.to_string()
            }
            "shutdown" => return ExitCode::SUCCESS,
            "step" => match &mode {
                Mode::Garbage => "this is not json".to_string(),
                Mode::Nan => r#"{"type":"u","value":"NaN"}"#.to_string(),
                Mode::Hang => loop {
                    std::thread::sleep(std::time::Duration::from_secs(60));
                },
                Mode::ExitEarly => return ExitCode::from(3),
                Mode::Record(_) | Mode::RejectProtocol => r#"{"type":"u","value":0.0}"#.to_string(),
                Mode::Pd(_) => {
                    let (t, r, y) = match (num(&msg, "t"), num(&msg, "r"), num(&msg, "y")) {
                        (Ok(t), Ok(r), Ok(y)) => (t, r, y),
                        _ => {
                            let _ = reply(
                                &mut out,
                                json!({"type": "error", "message": "bad step"}).to_string(),
                            );
                            continue;
                        }
                    };
                    let input = ControllerInput {
                        t,
                        r,
                        y_m: y,
                        e: r - y,
                        u_applied: 0.0,
                    };
                    match pid.as_mut().map(|p| p.step(&input)) {
                        Some(Ok(u)) => json!({"type": "u", "value": u}).to_string(),
                        Some(Err(e)) => {
                            json!({"type": "error", "message": e.to_string()}).to_string()
                        }
                        None => json!({"type": "error", "message": "step before init"}).to_string(),
                    }
                }
            },
            other => json!({"type": "error", "message": format!("unknown message type `{other}`")})
                .to_string(),
        };
        if reply(&mut out, answer).is_err() {
            break;
        }
    }
    ExitCode::SUCCESS
}
