use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use super::{early_stop_update, EarlyStopState, FinetuneConfig, FinetuneError};

pub const TRAINER_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerRequest {
    pub config: FinetuneConfig,
    pub manifest_path: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: u32,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainerCompletion {
    pub checkpoint: String,
}

/// Runs a fine-tuning session. After each epoch the trainer must call
/// `on_epoch` and honour the returned [`Control`] before starting the next.
pub trait Trainer {
    fn run(
        &mut self,
        request: &TrainerRequest,
        on_epoch: &mut dyn FnMut(&EpochReport) -> Control,
    ) -> Result<TrainerCompletion, FinetuneError>;
}

/// Replays a fixed accuracy sequence, one value per epoch, up to
/// `config.epochs`.
#[derive(Debug, Clone, Default)]
pub struct ScriptedTrainer {
    pub accuracies: Vec<f64>,
    pub checkpoint: String,
    /// Fail with this message after the given number of epochs.
    pub fail_after: Option<(u32, String)>,
    pub requests: Vec<TrainerRequest>,
}

impl ScriptedTrainer {
    pub fn new(accuracies: Vec<f64>) -> Self {
        ScriptedTrainer {
            accuracies,
            checkpoint: "scripted://checkpoint".into(),
            ..Default::default()
        }
    }

    pub fn calls(&self) -> usize {
        self.requests.len()
    }
}

impl Trainer for ScriptedTrainer {
    fn run(
        &mut self,
        request: &TrainerRequest,
        on_epoch: &mut dyn FnMut(&EpochReport) -> Control,
    ) -> Result<TrainerCompletion, FinetuneError> {
        self.requests.push(request.clone());
        let mut last = 0;
        for (i, &val_accuracy) in self.accuracies.iter().enumerate() {
            let epoch = i as u32 + 1;
            if epoch > request.config.epochs {
                break;
            }
            if let Some((after, message)) = &self.fail_after {
                if last >= *after {
                    return Err(FinetuneError::Trainer(message.clone()));
                }
            }
            last = epoch;
            if on_epoch(&EpochReport { epoch, val_accuracy }) == Control::Stop {
                break;
            }
        }
        Ok(TrainerCompletion {
            checkpoint: format!("{}@epoch{last}", self.checkpoint),
        })
    }
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum ToTrainer<'a> {
    Request {
        schema_version: u32,
        config: &'a FinetuneConfig,
        manifest_path: &'a Path,
    },
    Control {
        action: Control,
    },
}

#[derive(Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum FromTrainer {
    Epoch { epoch: u32, val_accuracy: f64 },
    Complete { checkpoint: String },
    Error { message: String },
}

/// Drives an external trainer process over JSON lines on stdin/stdout.
#[derive(Debug, Clone)]
pub struct ProcessTrainer {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl ProcessTrainer {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        ProcessTrainer {
            program: program.into(),
            args,
        }
    }
}

fn send(stdin: &mut impl Write, message: &ToTrainer) -> Result<(), FinetuneError> {
    let mut line = serde_json::to_string(message).expect("message serializes");
    line.push('\n');
    stdin
        .write_all(line.as_bytes())
        .and_then(|_| stdin.flush())
        .map_err(|e| FinetuneError::Trainer(format!("writing to trainer: {e}")))
}

impl Trainer for ProcessTrainer {
    fn run(
        &mut self,
        request: &TrainerRequest,
        on_epoch: &mut dyn FnMut(&EpochReport) -> Control,
    ) -> Result<TrainerCompletion, FinetuneError> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| FinetuneError::Trainer(format!("starting {}: {e}", self.program.display())))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut stderr = child.stderr.take().expect("piped stderr");
        let stderr_reader = std::thread::spawn(move || {
            let mut s = String::new();
            let _ = stderr.read_to_string(&mut s);
            s
        });

        let diagnostics = |status: String, stderr_reader: std::thread::JoinHandle<String>| {
            let err = stderr_reader.join().unwrap_or_default();
            let tail: Vec<&str> = err.lines().rev().take(20).collect();
            let tail: Vec<&str> = tail.into_iter().rev().collect();
            if tail.is_empty() {
                status
            } else {
                format!("{status}; stderr:\n{}", tail.join("\n"))
            }
        };

        send(
            &mut stdin,
            &ToTrainer::Request {
                schema_version: TRAINER_SCHEMA_VERSION,
                config: &request.config,
                manifest_path: &request.manifest_path,
            },
        )?;

        let mut outcome = None;
        for line in BufReader::new(stdout).lines() {
            let line = line.map_err(|e| FinetuneError::Trainer(format!("reading trainer output: {e}")))?;
            let trimmed = line.trim();
            if !trimmed.starts_with('{') {
                log::debug!("trainer: {trimmed}");
                continue;
            }
            let message: FromTrainer = serde_json::from_str(trimmed)
                .map_err(|e| FinetuneError::Trainer(format!("bad trainer message {trimmed:?}: {e}")))?;
            match message {
                FromTrainer::Epoch { epoch, val_accuracy } => {
                    let action = on_epoch(&EpochReport { epoch, val_accuracy });
                    send(&mut stdin, &ToTrainer::Control { action })?;
                }
                FromTrainer::Complete { checkpoint } => {
                    outcome = Some(Ok(TrainerCompletion { checkpoint }));
                    break;
                }
                FromTrainer::Error { message } => {
                    outcome = Some(Err(message));
                    break;
                }
            }
        }
        drop(stdin);
        let status = child
            .wait()
            .map_err(|e| FinetuneError::Trainer(format!("waiting for trainer: {e}")))?;
        match outcome {
            Some(Ok(done)) if status.success() => {
                let _ = stderr_reader.join();
                Ok(done)
            }
            Some(Ok(_)) => Err(FinetuneError::Trainer(diagnostics(
                format!("trainer reported completion but exited with {status}"),
                stderr_reader,
            ))),
            Some(Err(message)) => Err(FinetuneError::Trainer(diagnostics(message, stderr_reader))),
            None => Err(FinetuneError::Trainer(diagnostics(
                format!("trainer exited with {status} before reporting completion"),
                stderr_reader,
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub epochs: Vec<EpochReport>,
    pub best_epoch: Option<u32>,
    pub best_val_accuracy: Option<f64>,
    /// Last epoch the trainer ran.
    pub stop_epoch: Option<u32>,
    pub early_stopped: bool,
    pub checkpoint: String,
}

/// Validates the configuration, hands it to `trainer` and applies early
/// stopping to the reported validation accuracies.
pub fn run_finetune(
    config: &FinetuneConfig,
    manifest_path: &Path,
    trainer: &mut dyn Trainer,
    patience: u32,
) -> Result<RunSummary, FinetuneError> {
    let violations = config.validate();
    if !violations.is_empty() {
        return Err(FinetuneError::InvalidConfig(violations));
    }
    if !manifest_path.is_file() {
        return Err(FinetuneError::Contract(format!(
            "training manifest {} does not exist",
            manifest_path.display()
        )));
    }
    let request = TrainerRequest {
        config: config.clone(),
        manifest_path: manifest_path.to_path_buf(),
    };
    let mut state = EarlyStopState::new(patience);
    let mut epochs = Vec::new();
    let mut failure = None;
    let completion = trainer.run(&request, &mut |report: &EpochReport| {
        match early_stop_update(&state, report.epoch, report.val_accuracy) {
            Ok(next) => {
                log::info!("epoch {}: val accuracy {:.4} ({next})", report.epoch, report.val_accuracy);
                state = next;
                epochs.push(*report);
                if state.stopped {
                    Control::Stop
                } else {
                    Control::Continue
                }
            }
            Err(e) => {
                failure = Some(e);
                Control::Stop
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(RunSummary {
        stop_epoch: epochs.last().map(|e| e.epoch),
        epochs,
        best_epoch: state.best_epoch,
        best_val_accuracy: state.best_metric,
        early_stopped: state.stopped,
        checkpoint: completion.checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finetune::paper_default_config;

    fn manifest_file() -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        std::fs::write(&path, "").unwrap();
        (dir, path)
    }

    #[test]
    fn two_epochs_no_early_stop() {
        let (_d, path) = manifest_file();
        let mut t = ScriptedTrainer::new(vec![0.6, 0.7]);
        let s = run_finetune(&paper_default_config(), &path, &mut t, 1).unwrap();
        assert_eq!(s.best_epoch, Some(2));
        assert!(!s.early_stopped);
        assert_eq!(s.stop_epoch, Some(2));
        assert_eq!(s.checkpoint, "scripted://checkpoint@epoch2");
    }

    #[test]
    fn declining_accuracy_stops_at_three() {
        let (_d, path) = manifest_file();
        let mut config = paper_default_config();
        config.epochs = 3;
        let mut t = ScriptedTrainer::new(vec![0.7, 0.6, 0.5, 0.9]);
        let s = run_finetune(&config, &path, &mut t, 1).unwrap();
        assert!(s.early_stopped);
        assert_eq!(s.stop_epoch, Some(3));
        assert_eq!(s.best_epoch, Some(1));
        assert_eq!(s.epochs.len(), 3);
    }

    #[test]
    fn invalid_config_never_reaches_trainer() {
        let (_d, path) = manifest_file();
        let mut config = paper_default_config();
        config.effective_batch = 5;
        let mut t = ScriptedTrainer::new(vec![0.5]);
        assert!(matches!(
            run_finetune(&config, &path, &mut t, 1),
            Err(FinetuneError::InvalidConfig(_))
        ));
        assert_eq!(t.calls(), 0);
        assert!(run_finetune(&paper_default_config(), Path::new("/no/such/file"), &mut t, 1).is_err());
        assert_eq!(t.calls(), 0);
    }

    #[test]
    fn trainer_failure_propagates() {
        let (_d, path) = manifest_file();
        let mut t = ScriptedTrainer::new(vec![0.5, 0.6]);
        t.fail_after = Some((1, "CUDA out of memory".into()));
        match run_finetune(&paper_default_config(), &path, &mut t, 1) {
            Err(FinetuneError::Trainer(m)) => assert!(m.contains("out of memory")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wire_messages_are_tagged() {
        let config = paper_default_config();
        let req = serde_json::to_value(ToTrainer::Request {
            schema_version: 1,
            config: &config,
            manifest_path: Path::new("/m.jsonl"),
        })
        .unwrap();
        assert_eq!(req["type"], "request");
        assert_eq!(req["config"]["epochs"], 2);
        let ctl = serde_json::to_string(&ToTrainer::Control { action: Control::Stop }).unwrap();
        assert_eq!(ctl, r#"{"type":"control","action":"stop"}"#);
        let m: FromTrainer = serde_json::from_str(r#"{"type":"epoch","epoch":1,"val_accuracy":0.5}"#).unwrap();
        assert!(matches!(m, FromTrainer::Epoch { epoch: 1, .. }));
    }
}
