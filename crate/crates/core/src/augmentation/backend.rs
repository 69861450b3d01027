//! Counterfactual backends.
//!
//! The rule-based backend edits lexicon-tagged tokens directly. The
//! external backend talks to a long-lived child process over a
//! line-delimited JSON protocol on its standard streams:
//!
//! ```text
//! request  {"version":1,"source_id":..,"prompt":"..","sentence":[words],
//!           "target_start":..,"target_len":..,"label":"..","target_label":".."}
//! response {"version":1,"source_id":..,"counterfactual_text":"w03 neg07 ..",
//!           "label":"..","edit_instruction":"none" | "replace_signal:<label>"}
//! ```

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::Duration;

use log::warn;
use serde::{Deserialize, Serialize};

use super::counterfactual::{
    edit_image_features, reverse_sentiment_rule_based, CounterfactualKind, CounterfactualRecord,
    EditInstruction,
};
use super::lexicon::SentimentLexicon;
use super::prompt::build_prompt;
use crate::error::{CedError, Result};
use crate::synth_data::{MultimodalSample, Provenance, Sentiment};

pub const PROTOCOL_VERSION: u32 = 1;
/// Environment variable holding the external backend command line.
pub const BACKEND_ENV: &str = "CED_BACKEND_CMD";

pub trait CounterfactualBackend {
    fn name(&self) -> &'static str;

    fn reverse(
        &mut self,
        sample: &MultimodalSample,
        lexicon: &SentimentLexicon,
        target_label: Sentiment,
        seed: u64,
    ) -> Result<CounterfactualRecord>;
}

#[derive(Clone, Debug)]
pub struct RuleBasedBackend {
    pub signals: [Vec<f64>; 3],
    pub image_edit_noise: f64,
    pub edit_images: bool,
}

impl CounterfactualBackend for RuleBasedBackend {
    fn name(&self) -> &'static str {
        "rulebased"
    }

    fn reverse(
        &mut self,
        sample: &MultimodalSample,
        lexicon: &SentimentLexicon,
        target_label: Sentiment,
        seed: u64,
    ) -> Result<CounterfactualRecord> {
        reverse_sentiment_rule_based(
            sample,
            lexicon,
            target_label,
            &self.signals,
            self.image_edit_noise,
            self.edit_images,
            seed,
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BackendRequest {
    pub version: u32,
    pub source_id: u64,
    pub prompt: String,
    pub sentence: Vec<String>,
    pub target_start: usize,
    pub target_len: usize,
    pub label: Sentiment,
    pub target_label: Sentiment,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BackendResponse {
    pub version: u32,
    pub source_id: u64,
    pub counterfactual_text: String,
    pub label: Sentiment,
    pub edit_instruction: String,
}

pub fn parse_instruction(text: &str) -> Result<EditInstruction> {
    match text.trim() {
        "none" => Ok(EditInstruction::None),
        other => {
            let polarity = other
                .strip_prefix("replace_signal:")
                .ok_or_else(|| CedError::Data(format!("unknown edit instruction `{other}`")))?;
            Ok(EditInstruction::ReplaceSignal {
                polarity: polarity.trim().parse()?,
            })
        }
    }
}

pub fn format_instruction(instruction: EditInstruction) -> String {
    match instruction {
        EditInstruction::None => "none".to_string(),
        EditInstruction::ReplaceSignal { polarity } => format!("replace_signal:{polarity}"),
    }
}

struct ChildIo {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl ChildIo {
    fn spawn(command: &str) -> std::io::Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(ChildIo {
            child,
            stdin,
            lines: rx,
        })
    }
}

impl Drop for ChildIo {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub struct ExternalBackend {
    command: String,
    pub timeout: Duration,
    pub retries: usize,
    pub signals: [Vec<f64>; 3],
    pub image_edit_noise: f64,
    child: Option<ChildIo>,
}

impl ExternalBackend {
    pub fn new(command: impl Into<String>, signals: [Vec<f64>; 3], image_edit_noise: f64) -> Self {
        ExternalBackend {
            command: command.into(),
            timeout: Duration::from_secs(30),
            retries: 2,
            signals,
            image_edit_noise,
            child: None,
        }
    }

    /// Reads the command line from [`BACKEND_ENV`].
    pub fn from_env(signals: [Vec<f64>; 3], image_edit_noise: f64) -> Result<Self> {
        match std::env::var(BACKEND_ENV) {
            Ok(cmd) if !cmd.trim().is_empty() => Ok(Self::new(cmd, signals, image_edit_noise)),
            _ => Err(CedError::config(
                "backend",
                format!("external backend needs a command in ${BACKEND_ENV}"),
            )),
        }
    }

    fn exchange(&mut self, line: &str) -> std::result::Result<String, String> {
        if self.child.is_none() {
            self.child = Some(ChildIo::spawn(&self.command).map_err(|e| format!("spawn failed: {e}"))?);
        }
        let io = self.child.as_mut().expect("spawned above");
        writeln!(io.stdin, "{line}")
            .and_then(|_| io.stdin.flush())
            .map_err(|e| format!("write failed: {e}"))?;
        match io.lines.recv_timeout(self.timeout) {
            Ok(Ok(reply)) => Ok(reply),
            Ok(Err(e)) => Err(format!("read failed: {e}")),
            Err(RecvTimeoutError::Timeout) => Err(format!("no reply within {:?}", self.timeout)),
            Err(RecvTimeoutError::Disconnected) => Err("backend closed its output".to_string()),
        }
    }

    fn request(&mut self, source_id: u64, line: &str) -> Result<BackendResponse> {
        let mut last = String::new();
        for attempt in 0..=self.retries {
            match self.exchange(line) {
                Ok(reply) => {
                    let resp: BackendResponse = serde_json::from_str(&reply).map_err(|e| CedError::Backend {
                        source_id,
                        message: format!("malformed reply: {e}"),
                        retryable: false,
                    })?;
                    if resp.version != PROTOCOL_VERSION || resp.source_id != source_id {
                        return Err(CedError::Backend {
                            source_id,
                            message: format!(
                                "reply for sample {} with version {}",
                                resp.source_id, resp.version
                            ),
                            retryable: false,
                        });
                    }
                    return Ok(resp);
                }
                Err(message) => {
                    warn!("backend attempt {} for sample {source_id}: {message}", attempt + 1);
                    self.child = None;
                    last = message;
                }
            }
        }
        Err(CedError::Backend {
            source_id,
            message: last,
            retryable: true,
        })
    }
}

/// Positions where `new` differs from `old`, found by trimming the common
/// prefix and suffix. Returns the positions (in `new`) and whether `new`
/// is exactly one token longer.
fn diff_positions(old: &[usize], new: &[usize]) -> (Vec<usize>, bool) {
    if old.len() == new.len() {
        let pos = (0..old.len()).filter(|&i| old[i] != new[i]).collect();
        return (pos, false);
    }
    let prefix = old.iter().zip(new).take_while(|(a, b)| a == b).count();
    let max_suffix = old.len().min(new.len()) - prefix;
    let suffix = old
        .iter()
        .rev()
        .zip(new.iter().rev())
        .take(max_suffix)
        .take_while(|(a, b)| a == b)
        .count();
    ((prefix..new.len() - suffix).collect(), new.len() == old.len() + 1)
}

impl CounterfactualBackend for ExternalBackend {
    fn name(&self) -> &'static str {
        "external"
    }

    fn reverse(
        &mut self,
        sample: &MultimodalSample,
        lexicon: &SentimentLexicon,
        target_label: Sentiment,
        seed: u64,
    ) -> Result<CounterfactualRecord> {
        let request = BackendRequest {
            version: PROTOCOL_VERSION,
            source_id: sample.id,
            prompt: build_prompt(sample, lexicon, "", target_label),
            sentence: sample.tokens().iter().map(|&w| lexicon.word(w).to_string()).collect(),
            target_start: sample.target_start,
            target_len: sample.target_len,
            label: sample.label,
            target_label,
        };
        let line = serde_json::to_string(&request).expect("request serializes");
        let resp = self.request(sample.id, &line)?;
        let bad = |message: String| CedError::Backend {
            source_id: sample.id,
            message,
            retryable: false,
        };
        if resp.label != target_label {
            return Err(bad(format!("asked for {target_label}, got {}", resp.label)));
        }
        let tokens = resp
            .counterfactual_text
            .split_whitespace()
            .map(|w| lexicon.id_of(w).ok_or_else(|| bad(format!("unknown word `{w}`"))))
            .collect::<Result<Vec<_>>>()?;
        let target = &sample.tokens()[sample.target_range()];
        let target_start = if tokens.get(sample.target_range()) == Some(target) {
            sample.target_start
        } else {
            tokens
                .windows(target.len().max(1))
                .position(|w| w == target)
                .ok_or_else(|| bad("target span missing from reply".to_string()))?
        };
        let instruction = parse_instruction(&resp.edit_instruction).map_err(|e| bad(e.to_string()))?;
        let image = edit_image_features(
            &sample.image,
            sample.label,
            instruction,
            &self.signals,
            self.image_edit_noise,
            seed,
        )?;
        let (edited, injected) = diff_positions(sample.tokens(), &tokens);
        let new_sample = MultimodalSample::new(
            super::counterfactual::counterfactual_id(sample.id, target_label.index() as u64),
            tokens,
            target_start,
            sample.target_len,
            image.into_matrix(),
            target_label,
            Provenance::SentiReversed,
        )?;
        Ok(CounterfactualRecord {
            source_id: sample.id,
            new_sample,
            new_label: target_label,
            edited_token_positions: edited,
            instruction,
            kind: CounterfactualKind::SentiReversed,
            op: None,
            injected,
            identity: false,
        })
    }
}

fn causal_suffix(word: &str) -> Option<&str> {
    ["neg", "pos"].iter().find_map(|p| {
        word.strip_prefix(p)
            .filter(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
    })
}

/// Stand-in external service used for protocol tests. It recognises
/// causal words by their surface form and swaps them like the rule-based
/// backend, always with the first filler for neutral requests.
pub fn run_mock_backend(input: impl BufRead, mut output: impl Write) -> Result<()> {
    for line in input.lines() {
        let line = line.map_err(|e| CedError::io("<stdin>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let req: BackendRequest =
            serde_json::from_str(&line).map_err(|e| CedError::Data(format!("bad request: {e}")))?;
        let replacement = |digits: &str| match req.target_label {
            Sentiment::Neutral => "w00".to_string(),
            l => format!("{}{digits}", l.short()),
        };
        let mut words = req.sentence.clone();
        let mut changed = false;
        for w in words.iter_mut() {
            if let Some(d) = causal_suffix(w) {
                *w = replacement(d);
                changed = true;
            }
        }
        if !changed && req.target_label != Sentiment::Neutral {
            words.insert(req.target_start + req.target_len, replacement("00"));
        }
        let resp = BackendResponse {
            version: PROTOCOL_VERSION,
            source_id: req.source_id,
            counterfactual_text: words.join(" "),
            label: req.target_label,
            edit_instruction: format_instruction(EditInstruction::ReplaceSignal {
                polarity: req.target_label,
            }),
        };
        let text = serde_json::to_string(&resp).expect("response serializes");
        writeln!(output, "{text}")
            .and_then(|_| output.flush())
            .map_err(|e| CedError::io("<stdout>", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instruction_text_round_trip() {
        for i in [
            EditInstruction::None,
            EditInstruction::ReplaceSignal {
                polarity: Sentiment::Neutral,
            },
        ] {
            assert_eq!(parse_instruction(&format_instruction(i)).unwrap(), i);
        }
        assert!(parse_instruction("replace_signal:happy").is_err());
        assert!(parse_instruction("paint it red").is_err());
    }

    #[test]
    fn diff_positions_cases() {
        assert_eq!(diff_positions(&[1, 2, 3], &[1, 9, 3]), (vec![1], false));
        assert_eq!(diff_positions(&[1, 2, 3], &[1, 2, 7, 3]), (vec![2], true));
        assert_eq!(diff_positions(&[1, 2], &[1, 2, 2]), (vec![2], true));
    }

    #[test]
    fn mock_backend_swaps_causal_words() {
        let req = BackendRequest {
            version: 1,
            source_id: 4,
            prompt: String::new(),
            sentence: vec!["w01".into(), "pos03".into(), "bneg02".into()],
            target_start: 0,
            target_len: 1,
            label: Sentiment::Positive,
            target_label: Sentiment::Negative,
        };
        let input = serde_json::to_string(&req).unwrap() + "\n";
        let mut out = Vec::new();
        run_mock_backend(input.as_bytes(), &mut out).unwrap();
        let resp: BackendResponse = serde_json::from_slice(&out).unwrap();
        assert_eq!(resp.counterfactual_text, "w01 neg03 bneg02");
        assert_eq!(resp.source_id, 4);
    }

    #[test]
    fn unresponsive_backend_is_retryable() {
        let mut backend = ExternalBackend::new("sleep 5", crate::synth_data::default_signals(2), 0.0);
        backend.timeout = Duration::from_millis(100);
        backend.retries = 1;
        let s = MultimodalSample::new(
            9,
            vec![1, 2],
            0,
            1,
            crate::tensor_math::Matrix::zeros(1, 2),
            Sentiment::Positive,
            Provenance::Original,
        )
        .unwrap();
        let lex = SentimentLexicon::build(&crate::synth_data::CorpusSpec::default());
        match backend.reverse(&s, &lex, Sentiment::Negative, 1) {
            Err(CedError::Backend {
                source_id,
                retryable,
                ..
            }) => {
                assert_eq!(source_id, 9);
                assert!(retryable);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
