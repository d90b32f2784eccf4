//! Execution channels backed by a child process: a local shell or `ssh`.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant};

use regex::Regex;
use tracing::{debug, warn};

use super::{ActuationError, ChannelOutput, Command, ShellChannel};

/// Trailing `$ `, `# ` or `> ` at the end of the output.
pub const DEFAULT_PROMPT_PATTERN: &str = r"[$#>] $";

/// How the channel decides a command has finished.
#[derive(Debug, Clone)]
pub enum Completion {
    /// An end marker echoed after every command. Needs a non-interactive shell.
    Marker,
    /// The shell prompt reappearing at the end of the output.
    Prompt(Regex),
}

impl Completion {
    pub fn default_prompt() -> Self {
        Completion::Prompt(Regex::new(DEFAULT_PROMPT_PATTERN).expect("default prompt pattern compiles"))
    }

    pub fn prompt(pattern: &str) -> Result<Self, ActuationError> {
        Regex::new(pattern)
            .map(Completion::Prompt)
            .map_err(|e| ActuationError::Channel(format!("bad prompt pattern: {e}")))
    }
}

/// Connection settings for the attack machine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SshConfig {
    pub host: String,
    pub port: u16,
    pub user: String,
    pub key_path: Option<PathBuf>,
    /// Environment variable holding private key material.
    pub key_env: Option<String>,
    /// Extra `-o` style arguments passed to `ssh` verbatim.
    pub extra_args: Vec<String>,
}

impl SshConfig {
    pub fn new(host: impl Into<String>, user: impl Into<String>) -> Self {
        Self {
            host: host.into(),
            port: 22,
            user: user.into(),
            key_path: None,
            key_env: None,
            extra_args: Vec::new(),
        }
    }

    pub fn ssh_args(&self, key: Option<&Path>, tty: bool) -> Vec<String> {
        let mut args = vec![
            "-p".to_string(),
            self.port.to_string(),
            "-o".into(),
            "BatchMode=yes".into(),
            "-o".into(),
            "StrictHostKeyChecking=accept-new".into(),
        ];
        if let Some(key) = key {
            args.push("-i".into());
            args.push(key.display().to_string());
        }
        args.push(if tty { "-tt" } else { "-T" }.into());
        args.extend(self.extra_args.iter().cloned());
        args.push(format!("{}@{}", self.user, self.host));
        args
    }
}

enum Chunk {
    Data(Vec<u8>),
    Eof,
}

struct Running {
    child: Child,
    stdin: ChildStdin,
    rx: Receiver<Chunk>,
}

impl Running {
    fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// A long-lived child process fed one command at a time.
///
/// After a timeout the process is killed and a fresh one is started for the
/// next command, so state such as the working directory is lost at that point.
pub struct ProcessChannel {
    program: String,
    args: Vec<String>,
    completion: Completion,
    startup_timeout: Duration,
    running: Option<Running>,
    closed: bool,
    counter: u64,
    _key_file: Option<tempfile::NamedTempFile>,
}

impl ProcessChannel {
    pub fn new(program: impl Into<String>, args: Vec<String>, completion: Completion) -> Self {
        Self {
            program: program.into(),
            args,
            completion,
            startup_timeout: Duration::from_secs(30),
            running: None,
            closed: false,
            counter: 0,
            _key_file: None,
        }
    }

    /// `/bin/sh` on this machine, marker completion.
    pub fn local_shell() -> Self {
        Self::new("/bin/sh", Vec::new(), Completion::Marker)
    }

    pub fn ssh(config: &SshConfig, completion: Completion) -> Result<Self, ActuationError> {
        let mut key_file = None;
        let key: Option<PathBuf> = match (&config.key_path, &config.key_env) {
            (Some(path), _) => Some(path.clone()),
            (None, Some(var)) => {
                let material = std::env::var(var)
                    .map_err(|_| ActuationError::Channel(format!("environment variable {var} is not set")))?;
                let mut file = tempfile::NamedTempFile::new().map_err(|e| ActuationError::Channel(e.to_string()))?;
                file.write_all(material.trim_end().as_bytes())
                    .and_then(|_| file.write_all(b"\n"))
                    .map_err(|e| ActuationError::Channel(e.to_string()))?;
                let path = file.path().to_path_buf();
                key_file = Some(file);
                Some(path)
            }
            (None, None) => None,
        };
        let tty = matches!(completion, Completion::Prompt(_));
        let mut channel = Self::new("ssh", config.ssh_args(key.as_deref(), tty), completion);
        channel._key_file = key_file;
        Ok(channel)
    }

    pub fn with_startup_timeout(mut self, timeout: Duration) -> Self {
        self.startup_timeout = timeout;
        self
    }

    fn spawn(&mut self) -> Result<(), ActuationError> {
        debug!(program = %self.program, "starting channel process");
        // one pipe for both streams keeps prompts and output in order
        let (reader, writer) = std::io::pipe().map_err(|e| ActuationError::Channel(e.to_string()))?;
        let writer_err = writer.try_clone().map_err(|e| ActuationError::Channel(e.to_string()))?;
        let mut child = std::process::Command::new(&self.program)
            .args(&self.args)
            .env("PS1", "$ ")
            .stdin(Stdio::piped())
            .stdout(writer)
            .stderr(writer_err)
            .spawn()
            .map_err(|e| ActuationError::Channel(format!("{}: {e}", self.program)))?;
        let stdin = child.stdin.take().expect("stdin piped");
        let (tx, rx) = mpsc::channel();
        pump(reader, tx);
        let running = Running { child, stdin, rx };
        if let Completion::Prompt(re) = &self.completion {
            let deadline = Instant::now() + self.startup_timeout;
            let mut buf = Vec::new();
            match collect(&running.rx, &mut buf, deadline, |b| prompt_done(re, b)) {
                Collected::Done => debug!(banner = %String::from_utf8_lossy(&buf), "channel ready"),
                Collected::Eof => {
                    running.kill();
                    return Err(ActuationError::ChannelClosed);
                }
                Collected::TimedOut => {
                    running.kill();
                    return Err(ActuationError::Channel("no prompt from shell".into()));
                }
            }
        }
        self.running = Some(running);
        Ok(())
    }
}

fn pump(mut source: impl Read + Send + 'static, tx: Sender<Chunk>) {
    thread::spawn(move || {
        let mut buf = [0u8; 8192];
        loop {
            match source.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    if tx.send(Chunk::Data(buf[..n].to_vec())).is_err() {
                        return;
                    }
                }
            }
        }
        let _ = tx.send(Chunk::Eof);
    });
}

enum Collected {
    Done,
    Eof,
    TimedOut,
}

fn collect(rx: &Receiver<Chunk>, buf: &mut Vec<u8>, deadline: Instant, done: impl Fn(&[u8]) -> bool) -> Collected {
    loop {
        if done(buf) {
            return Collected::Done;
        }
        let now = Instant::now();
        if now >= deadline {
            return Collected::TimedOut;
        }
        match rx.recv_timeout(deadline - now) {
            Ok(Chunk::Data(bytes)) => buf.extend_from_slice(&bytes),
            Ok(Chunk::Eof) | Err(RecvTimeoutError::Disconnected) => return Collected::Eof,
            Err(RecvTimeoutError::Timeout) => return Collected::TimedOut,
        }
    }
}

fn find(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

fn prompt_done(re: &Regex, buf: &[u8]) -> bool {
    let text = String::from_utf8_lossy(buf);
    let last = text.rsplit('\n').next().unwrap_or("");
    re.is_match(last.trim_start_matches('\r'))
}

fn strip_prompt_output(text: &str, command: &str) -> String {
    let text = text.replace("\r\n", "\n");
    let mut lines: Vec<&str> = text.split('\n').collect();
    // trailing prompt line
    lines.pop();
    if lines.first().is_some_and(|l| l.trim_end().ends_with(command)) {
        lines.remove(0);
    }
    lines.join("\n")
}

impl ShellChannel for ProcessChannel {
    fn run(&mut self, command: &Command) -> Result<ChannelOutput, ActuationError> {
        if self.closed {
            return Err(ActuationError::ChannelClosed);
        }
        if self.running.is_none() {
            self.spawn()?;
        }
        self.counter += 1;
        let marker = format!("__BREACHGRAPH_END_{}_{}__", std::process::id(), self.counter);
        let input = match &self.completion {
            Completion::Marker => format!("{}\nprintf '\\n%s\\n' '{marker}'\n", command.text),
            Completion::Prompt(_) => format!("{}\n", command.text),
        };
        let running = self.running.as_mut().expect("spawned above");
        if running.stdin.write_all(input.as_bytes()).and_then(|_| running.stdin.flush()).is_err() {
            self.close();
            return Err(ActuationError::ChannelClosed);
        }

        let timeout = Duration::from_secs_f64(command.timeout_s.max(0.0));
        let deadline = Instant::now() + timeout;
        let mut buf = Vec::new();
        let end = format!("\n{marker}");
        let outcome = match &self.completion {
            Completion::Marker => collect(&running.rx, &mut buf, deadline, |b| find(b, end.as_bytes()).is_some()),
            Completion::Prompt(re) => collect(&running.rx, &mut buf, deadline, |b| prompt_done(re, b)),
        };
        match outcome {
            Collected::Done => {
                let output = match &self.completion {
                    Completion::Marker => {
                        let cut = find(&buf, end.as_bytes()).expect("marker present");
                        String::from_utf8_lossy(&buf[..cut]).into_owned()
                    }
                    Completion::Prompt(_) => strip_prompt_output(&String::from_utf8_lossy(&buf), &command.text),
                };
                Ok(ChannelOutput {
                    output,
                    timed_out: false,
                })
            }
            Collected::TimedOut => {
                warn!(task = command.task_id, timeout_s = command.timeout_s, "command timed out; restarting channel");
                if let Some(r) = self.running.take() {
                    r.kill();
                }
                Ok(ChannelOutput {
                    output: String::from_utf8_lossy(&buf).replace("\r\n", "\n"),
                    timed_out: true,
                })
            }
            Collected::Eof => {
                self.close();
                Err(ActuationError::ChannelClosed)
            }
        }
    }

    fn is_open(&self) -> bool {
        !self.closed
    }

    fn close(&mut self) {
        self.closed = true;
        if let Some(r) = self.running.take() {
            r.kill();
        }
    }
}

impl Drop for ProcessChannel {
    fn drop(&mut self) {
        if let Some(r) = self.running.take() {
            r.kill();
        }
    }
}
