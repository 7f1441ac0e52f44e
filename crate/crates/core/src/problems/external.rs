use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::Duration;

use super::{check_dimension, BitString, ProblemInstance};
use crate::error::{Error, Result};

/// Adapter exposing an external evaluator process as a problem instance.
///
/// Wire protocol (stdio, line-oriented, UTF-8): the adapter first sends
/// `DIM\n` and the evaluator replies with the instance dimension; each
/// evaluation is one `EVAL <bitstring>\n` request answered by one decimal
/// float. The returned value is the objective under the maximization
/// convention; any sign flipping is the evaluator's responsibility.
///
/// Round-trips are serialized per process; spawn one adapter per worker for
/// parallel evaluation.
pub struct ExternalInstance {
    id: String,
    dimension: usize,
    timeout: Duration,
    proc: Mutex<ProcHandle>,
}

struct ProcHandle {
    child: Child,
    stdin: ChildStdin,
    replies: Receiver<std::io::Result<String>>,
}

impl ProcHandle {
    fn request(&mut self, line: &str, timeout: Duration) -> Result<String> {
        self.stdin
            .write_all(line.as_bytes())
            .and_then(|()| self.stdin.flush())
            .map_err(|e| Error::Protocol(format!("evaluator stdin closed: {e}")))?;
        match self.replies.recv_timeout(timeout) {
            Ok(Ok(reply)) => Ok(reply),
            Ok(Err(e)) => Err(Error::Protocol(format!("evaluator read failed: {e}"))),
            Err(RecvTimeoutError::Timeout) => Err(Error::EvaluatorTimeout(timeout)),
            Err(RecvTimeoutError::Disconnected) => {
                Err(Error::Protocol("evaluator process exited".into()))
            }
        }
    }
}

impl ExternalInstance {
    /// Spawn the evaluator and perform the `DIM` handshake.
    pub fn spawn(id: impl Into<String>, command: &[String], timeout: Duration) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::Config("empty evaluator command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| Error::Protocol(format!("cannot spawn {program}: {e}")))?;
        let stdin = child.stdin.take().expect("stdin piped");
        let stdout = child.stdout.take().expect("stdout piped");
        let (tx, rx) = std::sync::mpsc::channel();
        std::thread::spawn(move || {
            let reader = BufReader::new(stdout);
            for line in reader.lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let mut proc = ProcHandle {
            child,
            stdin,
            replies: rx,
        };
        let reply = proc.request("DIM\n", timeout)?;
        let dimension: usize = reply
            .trim()
            .parse()
            .map_err(|_| Error::Protocol(format!("bad DIM reply {reply:?}")))?;
        Ok(Self {
            id: id.into(),
            dimension,
            timeout,
            proc: Mutex::new(proc),
        })
    }
}

impl ProblemInstance for ExternalInstance {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn id(&self) -> &str {
        &self.id
    }

    fn evaluate(&self, x: &BitString) -> Result<f64> {
        check_dimension(self.dimension, x)?;
        let mut proc = self.proc.lock().expect("evaluator lock");
        let reply = proc.request(&format!("EVAL {x}\n"), self.timeout)?;
        reply
            .trim()
            .parse::<f64>()
            .map_err(|_| Error::Protocol(format!("unparsable reply {reply:?}")))
    }
}

impl Drop for ExternalInstance {
    fn drop(&mut self) {
        if let Ok(mut proc) = self.proc.lock() {
            let _ = proc.child.kill();
            let _ = proc.child.wait();
        }
    }
}
