//! Operator prompts on the terminal for `run` in manual and semi-automatic mode.
//!
//! A result is typed as any number of lines ended by a line holding a single
//! `.`. The first line may be `!success` or `!failure` to give the verdict
//! directly. `!abort` or end of input aborts the session.

use std::io::{BufRead, Write};
use std::sync::Mutex;

use breachgraph_core::phase_pipeline::{OperatorChannel, OperatorError, OperatorReply, OperatorRequest};

struct Io<R, W> {
    input: R,
    output: W,
    aborted: bool,
}

pub struct TerminalOperator<R, W> {
    io: Mutex<Io<R, W>>,
}

impl<R: BufRead + Send, W: Write + Send> TerminalOperator<R, W> {
    pub fn new(input: R, output: W) -> Self {
        Self {
            io: Mutex::new(Io {
                input,
                output,
                aborted: false,
            }),
        }
    }
}

impl<R: BufRead, W: Write> Io<R, W> {
    fn line(&mut self) -> Option<String> {
        let mut line = String::new();
        match self.input.read_line(&mut line) {
            Ok(0) | Err(_) => None,
            Ok(_) => Some(line.trim_end_matches(['\n', '\r']).to_string()),
        }
    }

    fn say(&mut self, text: &str) {
        // a closed terminal is noticed on the next read
        let _ = self.output.write_all(text.as_bytes());
        let _ = self.output.flush();
    }

    fn abort(&mut self) -> OperatorError {
        self.aborted = true;
        OperatorError::Aborted
    }
}

fn header(request: &OperatorRequest) -> String {
    let mut text = format!(
        "\n[{} phase] task {}: {}\n{}\n",
        request.phase, request.task_id, request.instruction, request.detail
    );
    if let Some(cmd) = &request.command {
        text.push_str(&format!("command: {cmd}\n"));
    }
    text
}

impl<R: BufRead + Send, W: Write + Send> OperatorChannel for TerminalOperator<R, W> {
    fn request_result(&self, request: OperatorRequest) -> Result<OperatorReply, OperatorError> {
        let mut io = self.io.lock().expect("terminal lock poisoned");
        if io.aborted {
            return Err(OperatorError::Aborted);
        }
        io.say(&header(&request));
        io.say("Enter the result, then a line with a single '.' (!success / !failure first to decide, !abort to stop):\n");
        let mut lines = Vec::new();
        let mut success_hint = None;
        loop {
            let Some(line) = io.line() else {
                return Err(io.abort());
            };
            match line.trim() {
                "." => break,
                "!abort" => return Err(io.abort()),
                "!success" if lines.is_empty() && success_hint.is_none() => success_hint = Some(true),
                "!failure" if lines.is_empty() && success_hint.is_none() => success_hint = Some(false),
                _ => lines.push(line),
            }
        }
        Ok(OperatorReply {
            result: lines.join("\n"),
            success_hint,
        })
    }

    fn request_approval(&self, request: OperatorRequest) -> Result<(), OperatorError> {
        let mut io = self.io.lock().expect("terminal lock poisoned");
        if io.aborted {
            return Err(OperatorError::Aborted);
        }
        io.say(&header(&request));
        loop {
            io.say("Run this command? [y / !abort] ");
            let Some(line) = io.line() else {
                return Err(io.abort());
            };
            match line.trim() {
                "y" | "Y" | "yes" => return Ok(()),
                "!abort" => return Err(io.abort()),
                _ => {}
            }
        }
    }

    fn aborted(&self) -> bool {
        self.io.lock().expect("terminal lock poisoned").aborted
    }
}
