//! Responders for external model endpoints.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use acute_core::selfchat::{
    generate_conversation, health_probe, EndpointError, ModelEndpoint, Responder, SelfChatConfig,
    SelfChatError, SelfChatOutcome, Transport, TurnRequest, TurnResponse,
};

/// POSTs each request as JSON and reads `{"text": ..}` back.
pub struct HttpResponder {
    agent: ureq::Agent,
    url: String,
}

impl HttpResponder {
    pub fn new(url: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        HttpResponder {
            agent,
            url: url.into(),
        }
    }
}

impl Responder for HttpResponder {
    fn respond(&mut self, request: &TurnRequest) -> Result<String, EndpointError> {
        let classify = |e: ureq::Error| match e {
            ureq::Error::Timeout(_) => EndpointError::Timeout,
            other => EndpointError::Failure(other.to_string()),
        };
        let mut resp = self.agent.post(&self.url).send_json(request).map_err(classify)?;
        let body: TurnResponse = resp.body_mut().read_json().map_err(classify)?;
        Ok(body.text)
    }
}

struct Session {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl Session {
    fn spawn(command: &str) -> Result<Self, EndpointError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| EndpointError::Failure(format!("spawn `{command}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, lines) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Session {
            child,
            stdin,
            lines,
        })
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Talks to a long-lived child process, one JSON record per line each way.
/// The process is restarted after a timeout or a broken pipe.
pub struct SubprocessResponder {
    command: String,
    timeout: Duration,
    session: Option<Session>,
}

impl SubprocessResponder {
    pub fn new(command: &str, timeout: Duration) -> Self {
        SubprocessResponder {
            command: command.into(),
            timeout,
            session: None,
        }
    }

    fn exchange(&mut self, line: &str) -> Result<String, EndpointError> {
        if self.session.is_none() {
            self.session = Some(Session::spawn(&self.command)?);
        }
        let session = self.session.as_mut().expect("session present");
        session
            .stdin
            .write_all(line.as_bytes())
            .and_then(|_| session.stdin.write_all(b"\n"))
            .and_then(|_| session.stdin.flush())
            .map_err(|e| EndpointError::Failure(format!("write: {e}")))?;
        match session.lines.recv_timeout(self.timeout) {
            Ok(Ok(reply)) => Ok(reply),
            Ok(Err(e)) => Err(EndpointError::Failure(format!("read: {e}"))),
            Err(RecvTimeoutError::Timeout) => Err(EndpointError::Timeout),
            Err(RecvTimeoutError::Disconnected) => {
                Err(EndpointError::Failure("endpoint process exited".into()))
            }
        }
    }
}

impl Responder for SubprocessResponder {
    fn respond(&mut self, request: &TurnRequest) -> Result<String, EndpointError> {
        let line = serde_json::to_string(request)
            .map_err(|e| EndpointError::Failure(e.to_string()))?;
        let reply = self.exchange(&line).inspect_err(|_| self.session = None)?;
        let body: TurnResponse = serde_json::from_str(&reply)
            .map_err(|e| EndpointError::Failure(format!("bad reply: {e}")))?;
        Ok(body.text)
    }
}

pub fn responder_for(endpoint: &ModelEndpoint) -> Box<dyn Responder + Send> {
    let timeout = Duration::from_millis(endpoint.timeout_ms);
    match endpoint.transport {
        Transport::Http => Box::new(HttpResponder::new(&endpoint.address, timeout)),
        Transport::Subprocess => Box::new(SubprocessResponder::new(&endpoint.address, timeout)),
    }
}

/// Generates all conversations of `config` with up to `jobs` independent
/// endpoint sessions. The result does not depend on `jobs`.
pub fn run_self_chats_parallel<F>(
    make_responder: F,
    endpoint: &ModelEndpoint,
    config: &SelfChatConfig,
    jobs: usize,
) -> Result<SelfChatOutcome, SelfChatError>
where
    F: Fn() -> Box<dyn Responder + Send> + Sync,
{
    endpoint.validate()?;
    config.validate()?;
    health_probe(&mut *make_responder())?;

    let jobs = jobs.clamp(1, config.num_conversations as usize);
    let results = Mutex::new(Vec::with_capacity(config.num_conversations as usize));
    thread::scope(|scope| {
        for job in 0..jobs {
            let (make_responder, results) = (&make_responder, &results);
            scope.spawn(move || {
                let mut responder = make_responder();
                for index in (job as u32..config.num_conversations).step_by(jobs) {
                    let r = generate_conversation(&mut *responder, endpoint, config, index);
                    if let Err(f) = &r {
                        log::warn!("conversation {} failed at turn {}: {}", f.index, f.turn_index, f.error);
                    }
                    results.lock().unwrap_or_else(|p| p.into_inner()).push((index, r));
                }
            });
        }
    });

    let mut results = results.into_inner().unwrap_or_else(|p| p.into_inner());
    results.sort_by_key(|(i, _)| *i);
    let mut out = SelfChatOutcome::default();
    for (_, r) in results {
        match r {
            Ok(c) => out.conversations.push(c),
            Err(f) => out.failures.push(f),
        }
    }
    Ok(out)
}
