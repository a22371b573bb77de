//! Instruction datasets: JSON-lines ingestion, the byte-level tokenizer,
//! loss masking, and a synthetic corpus for desk-scale runs.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, XftError};

pub const BOS: usize = 256;
pub const SEP: usize = 257;
pub const EOS: usize = 258;
pub const VOCAB_SIZE: usize = 259;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionExample {
    pub instruction: String,
    pub output: String,
}

impl InstructionExample {
    pub fn new(instruction: impl Into<String>, output: impl Into<String>) -> Self {
        Self { instruction: instruction.into(), output: output.into() }
    }
}

/// Token ids with a per-token loss flag (1 = the model is trained to predict it).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedExample {
    pub tokens: Vec<usize>,
    pub mask: Vec<u8>,
}

impl TokenizedExample {
    pub fn as_pair(&self) -> (&[usize], &[u8]) {
        (&self.tokens, &self.mask)
    }
}

/// Byte-level tokenizer: ids 0..=255 are raw UTF-8 bytes, then BOS, SEP, EOS.
#[derive(Clone, Copy, Debug, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.bytes().map(usize::from).collect()
    }

    /// Decodes byte tokens lossily; special tokens are dropped.
    pub fn decode(&self, tokens: &[usize]) -> String {
        let bytes: Vec<u8> = tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// `BOS instruction SEP`, the prefix a model is asked to continue.
    pub fn prompt(&self, instruction: &str) -> Vec<usize> {
        let mut t = vec![BOS];
        t.extend(self.encode(instruction));
        t.push(SEP);
        t
    }
}

/// `BOS + instruction + SEP + output + EOS` with the loss mask set on the
/// output and EOS. Over-long sequences lose instruction tokens from the left
/// first, then output tokens from the right. Returns `None` when no output
/// token survives.
pub fn tokenize_and_mask(ex: &InstructionExample, tok: &ByteTokenizer, max_seq_len: usize) -> Option<TokenizedExample> {
    let mut ins = tok.encode(&ex.instruction);
    let mut out = tok.encode(&ex.output);
    if out.is_empty() {
        return None;
    }
    let overflow = (ins.len() + out.len() + 3).saturating_sub(max_seq_len);
    if overflow > 0 {
        let from_ins = overflow.min(ins.len());
        ins.drain(..from_ins);
        let rest = overflow - from_ins;
        if rest >= out.len() {
            return None;
        }
        out.truncate(out.len() - rest);
    }
    let mut tokens = Vec::with_capacity(ins.len() + out.len() + 3);
    tokens.push(BOS);
    tokens.extend(&ins);
    tokens.push(SEP);
    tokens.extend(&out);
    tokens.push(EOS);
    let prefix = ins.len() + 2;
    let mut mask = vec![0u8; prefix];
    mask.resize(tokens.len(), 1);
    Some(TokenizedExample { tokens, mask })
}

/// Tokenizes a corpus, logging and skipping examples whose output cannot fit.
pub fn tokenize_corpus(examples: &[InstructionExample], max_seq_len: usize) -> Vec<TokenizedExample> {
    let tok = ByteTokenizer;
    examples
        .iter()
        .enumerate()
        .filter_map(|(i, ex)| {
            let t = tokenize_and_mask(ex, &tok, max_seq_len);
            if t.is_none() {
                log::warn!("skipping example {i}: output does not fit in {max_seq_len} tokens");
            }
            t
        })
        .collect()
}

#[derive(Deserialize)]
struct RawExample {
    instruction: Option<serde_json::Value>,
    output: Option<serde_json::Value>,
}

/// Parses JSON lines with string fields `instruction` and `output`. Unknown
/// fields are ignored and blank lines skipped; any other defect is reported
/// with its 1-based line number.
pub fn parse_instruction_jsonl(text: &str, path: &Path) -> Result<Vec<InstructionExample>> {
    let err = |line: usize, message: String| XftError::Dataset { path: path.to_path_buf(), line, message };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawExample = serde_json::from_str(line).map_err(|e| err(n, format!("malformed JSON: {e}")))?;
        let field = |v: Option<serde_json::Value>, name: &str| -> Result<String> {
            match v {
                Some(serde_json::Value::String(s)) if !s.trim().is_empty() => Ok(s),
                Some(serde_json::Value::String(_)) => Err(err(n, format!("field \"{name}\" is empty"))),
                Some(_) => Err(err(n, format!("field \"{name}\" is not a string"))),
                None => Err(err(n, format!("missing field \"{name}\""))),
            }
        };
        let instruction = field(raw.instruction, "instruction")?;
        let output = field(raw.output, "output")?;
        out.push(InstructionExample { instruction, output });
    }
    if out.is_empty() {
        return Err(err(0, "dataset contains no examples".into()));
    }
    Ok(out)
}

pub fn load_instruction_dataset(path: &Path) -> Result<Vec<InstructionExample>> {
    let text = fs::read_to_string(path).map_err(|e| XftError::io(path, e))?;
    parse_instruction_jsonl(&text, path)
}

pub fn write_instruction_dataset(path: &Path, examples: &[InstructionExample]) -> Result<()> {
    let mut text = String::new();
    for ex in examples {
        text.push_str(&serde_json::to_string(ex).expect("string fields serialize"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| XftError::io(path, e))
}

const WORDS: &[&str] = &[
    "apple", "river", "stone", "cloud", "maple", "tiger", "lemon", "orbit", "pixel", "quartz", "delta",
    "ember", "frost", "grape", "harbor", "island", "jungle", "kernel", "lunar", "meadow", "nectar", "ocean",
    "prism", "raven", "solar", "tulip", "velvet", "willow", "zebra", "copper",
];

/// Deterministic synthetic instruction pairs over a handful of string and
/// arithmetic tasks.
pub fn synthetic_corpus(count: usize, seed: u64) -> Vec<InstructionExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let w = *WORDS.choose(&mut rng).expect("nonempty word list");
            match rng.gen_range(0..6) {
                0 => InstructionExample::new(format!("reverse {w}"), w.chars().rev().collect::<String>()),
                1 => InstructionExample::new(format!("upper {w}"), w.to_uppercase()),
                2 => {
                    let (a, b) = (rng.gen_range(0..50), rng.gen_range(0..50));
                    InstructionExample::new(format!("add {a} {b}"), (a + b).to_string())
                }
                3 => {
                    let n = rng.gen_range(2..5);
                    InstructionExample::new(format!("repeat {w} {n}"), vec![w; n].join(" "))
                }
                4 => {
                    let mut c: Vec<char> = w.chars().collect();
                    c.sort_unstable();
                    InstructionExample::new(format!("sort {w}"), c.into_iter().collect::<String>())
                }
                _ => {
                    let v = *WORDS.choose(&mut rng).expect("nonempty word list");
                    InstructionExample::new(format!("join {w} {v}"), format!("{w}-{v}"))
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_covers_output_and_eos() {
        let ex = InstructionExample::new("add 2 3", "5");
        let t = tokenize_and_mask(&ex, &ByteTokenizer, 64).unwrap();
        assert_eq!(t.tokens.len(), t.mask.len());
        assert_eq!(t.tokens[0], BOS);
        assert_eq!(*t.tokens.last().unwrap(), EOS);
        assert_eq!(t.mask.iter().map(|&m| m as usize).sum::<usize>(), 1 + 1);
        assert_eq!(t.mask[..9], [0; 9]);
    }

    #[test]
    fn empty_output_is_skipped() {
        let ex = InstructionExample::new("say nothing", "");
        assert!(tokenize_and_mask(&ex, &ByteTokenizer, 64).is_none());
    }

    #[test]
    fn truncation_drops_instruction_from_the_left() {
        let ex = InstructionExample::new("abcdefgh", "xyz");
        let t = tokenize_and_mask(&ex, &ByteTokenizer, 10).unwrap();
        assert_eq!(t.tokens.len(), 10);
        assert_eq!(ByteTokenizer.decode(&t.tokens[1..5]), "efgh");
        assert_eq!(t.mask.iter().filter(|&&m| m == 1).count(), 4);
    }

    #[test]
    fn output_fully_truncated_is_skipped() {
        let ex = InstructionExample::new("abc", "xyz");
        assert!(tokenize_and_mask(&ex, &ByteTokenizer, 3).is_none());
        let partial = tokenize_and_mask(&ex, &ByteTokenizer, 4).unwrap();
        assert_eq!(partial.tokens, vec![BOS, SEP, b'x' as usize, EOS]);
    }

    #[test]
    fn parses_valid_lines_in_order() {
        let text = "{\"instruction\":\"a\",\"output\":\"b\",\"extra\":1}\n{\"instruction\":\"c\",\"output\":\"d\"}\n";
        let v = parse_instruction_jsonl(text, Path::new("x.jsonl")).unwrap();
        assert_eq!(v, vec![InstructionExample::new("a", "b"), InstructionExample::new("c", "d")]);
    }

    #[test]
    fn missing_output_names_the_line() {
        let text = "{\"instruction\":\"a\",\"output\":\"b\"}\n{\"instruction\":\"c\"}\n";
        let e = parse_instruction_jsonl(text, Path::new("d.jsonl")).unwrap_err();
        match e {
            XftError::Dataset { line, ref message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("output"));
            }
            other => panic!("unexpected {other}"),
        }
        assert!(e.to_string().starts_with("d.jsonl:2:"));
    }

    #[test]
    fn malformed_and_empty_inputs_error() {
        assert!(parse_instruction_jsonl("{not json}\n", Path::new("d")).is_err());
        assert!(parse_instruction_jsonl("", Path::new("d")).is_err());
        assert!(parse_instruction_jsonl("{\"instruction\":\" \",\"output\":\"x\"}", Path::new("d")).is_err());
        assert!(parse_instruction_jsonl("{\"instruction\":3,\"output\":\"x\"}", Path::new("d")).is_err());
    }

    #[test]
    fn synthetic_corpus_is_deterministic() {
        let a = synthetic_corpus(50, 9);
        assert_eq!(a, synthetic_corpus(50, 9));
        assert_ne!(a, synthetic_corpus(50, 10));
        assert!(a.iter().all(|e| !e.instruction.is_empty() && !e.output.is_empty()));
    }
}
