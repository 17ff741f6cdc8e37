//! Instruction normalization and pair encoding.
//!
//! Raw disassembly lines (`address mnemonic operands`) are turned into a flat
//! token stream with a closed literal vocabulary:
//!
//! * literals (immediates, addresses, displacements) whose magnitude is
//!   strictly greater than [`NormalizeConfig::imm_threshold`] become `IMM`;
//! * jump targets inside the function become `OFF+d` / `OFF-d`, `d` being the
//!   signed distance from the jumping instruction;
//! * calls to user functions become `func`, calls to known libc exports keep
//!   the export name;
//! * absolute literals that land inside the function are rebased against the
//!   function's base address before the threshold is applied.
//!
//! Memory operands are split into punctuation and atoms, so `[rbp-0x8]`
//! becomes `[ rbp - 8 ]`.

mod libc;

use std::borrow::Cow;
use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::FunctionRecord;
use crate::{Error, Result};

pub use libc::DEFAULT_LIBC_NAMES;

pub const IMM_TOKEN: &str = "IMM";
pub const FUNC_TOKEN: &str = "func";
pub const SEP_TOKEN: &str = "[SEP]";
pub const OFFSET_PREFIX: &str = "OFF";

pub const DEFAULT_IMM_THRESHOLD: u64 = 5000;
pub const DEFAULT_MAX_PAIR_TOKENS: usize = 2048;

const PUNCTUATION: &[char] = &['[', ']', '+', '-', '*', ':'];
const PREFIXES: &[&str] = &[
    "lock", "rep", "repe", "repz", "repne", "repnz", "bnd", "notrack",
];
const IDA_ADDRESS_LABELS: &[&str] = &[
    "sub_", "loc_", "locret_", "off_", "unk_", "byte_", "word_", "dword_", "qword_", "j_",
];

#[rustfmt::skip]
pub const REGISTERS: &[&str] = &[
    "rax", "rbx", "rcx", "rdx", "rsi", "rdi", "rbp", "rsp", "rip",
    "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15",
    "eax", "ebx", "ecx", "edx", "esi", "edi", "ebp", "esp", "eip",
    "r8d", "r9d", "r10d", "r11d", "r12d", "r13d", "r14d", "r15d",
    "ax", "bx", "cx", "dx", "si", "di", "bp", "sp",
    "r8w", "r9w", "r10w", "r11w", "r12w", "r13w", "r14w", "r15w",
    "al", "bl", "cl", "dl", "sil", "dil", "bpl", "spl", "ah", "bh", "ch", "dh",
    "r8b", "r9b", "r10b", "r11b", "r12b", "r13b", "r14b", "r15b",
    "cs", "ds", "es", "fs", "gs", "ss",
    "xmm0", "xmm1", "xmm2", "xmm3", "xmm4", "xmm5", "xmm6", "xmm7",
    "xmm8", "xmm9", "xmm10", "xmm11", "xmm12", "xmm13", "xmm14", "xmm15",
    "ymm0", "ymm1", "ymm2", "ymm3", "ymm4", "ymm5", "ymm6", "ymm7",
    "st0", "st1", "st2", "st3", "st4", "st5", "st6", "st7",
];

pub fn is_register(token: &str) -> bool {
    REGISTERS.contains(&token)
}

pub fn is_jump_mnemonic(mnemonic: &str) -> bool {
    mnemonic.starts_with('j')
        || matches!(mnemonic, "loop" | "loope" | "loopne" | "loopz" | "loopnz")
}

fn is_call_mnemonic(mnemonic: &str) -> bool {
    matches!(mnemonic, "call" | "callq")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalizeConfig {
    pub imm_threshold: u64,
    pub libc_names: BTreeSet<String>,
    pub max_pair_tokens: usize,
}

impl Default for NormalizeConfig {
    fn default() -> Self {
        Self {
            imm_threshold: DEFAULT_IMM_THRESHOLD,
            libc_names: DEFAULT_LIBC_NAMES.iter().map(|s| s.to_string()).collect(),
            max_pair_tokens: DEFAULT_MAX_PAIR_TOKENS,
        }
    }
}

impl NormalizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.imm_threshold == 0 {
            return Err(Error::InvalidArgument("imm_threshold must be > 0".into()));
        }
        if self.max_pair_tokens == 0 {
            return Err(Error::InvalidArgument("max_pair_tokens must be > 0".into()));
        }
        for special in [IMM_TOKEN, FUNC_TOKEN, SEP_TOKEN] {
            if self.libc_names.contains(special) {
                return Err(Error::InvalidArgument(format!(
                    "special token `{special}` listed as a libc name"
                )));
            }
        }
        Ok(())
    }

    /// Reads a libc name list: one name per line, `#` starts a comment.
    pub fn load_libc_names(path: &Path) -> Result<BTreeSet<String>> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect())
    }
}

/// Normalized token stream of one function.
///
/// `instruction_starts[i]` is the index of the first token of instruction `i`.
/// A sequence cut by left truncation may begin mid-instruction; the partial
/// leading instruction then starts at 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub origin_id: String,
    pub tokens: Vec<String>,
    #[serde(default)]
    pub instruction_starts: Vec<usize>,
}

impl TokenSequence {
    /// Wraps a bare token list, treating it as a single instruction.
    pub fn from_tokens(origin_id: impl Into<String>, tokens: Vec<String>) -> Self {
        let instruction_starts = if tokens.is_empty() { vec![] } else { vec![0] };
        Self {
            origin_id: origin_id.into(),
            tokens,
            instruction_starts,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn instructions(&self) -> impl Iterator<Item = &[String]> + '_ {
        let ends = self
            .instruction_starts
            .iter()
            .skip(1)
            .copied()
            .chain(std::iter::once(self.tokens.len()));
        self.instruction_starts
            .iter()
            .zip(ends)
            .map(move |(&s, e)| &self.tokens[s..e])
    }

    /// Opcode of each instruction, skipping prefixes such as `rep` or `lock`.
    pub fn mnemonics(&self) -> impl Iterator<Item = &str> + '_ {
        self.instructions().filter_map(|ins| {
            ins.iter()
                .map(String::as_str)
                .find(|t| !PREFIXES.contains(t))
        })
    }

    /// Named direct call targets (libc names surviving normalization).
    pub fn call_targets(&self) -> impl Iterator<Item = &str> + '_ {
        self.instructions().filter_map(|ins| match ins {
            [call, target] if is_call_mnemonic(call) => {
                let t = target.as_str();
                (t != FUNC_TOKEN && t != IMM_TOKEN && !is_register(t) && parse_decimal(t).is_none())
                    .then_some(t)
            }
            _ => None,
        })
    }

    /// The last `n` tokens, keeping instruction boundaries that survive.
    pub fn suffix(&self, n: usize) -> TokenSequence {
        let n = n.min(self.tokens.len());
        let cut = self.tokens.len() - n;
        let mut starts: Vec<usize> = self
            .instruction_starts
            .iter()
            .filter(|&&s| s >= cut)
            .map(|&s| s - cut)
            .collect();
        if n > 0 && starts.first() != Some(&0) {
            starts.insert(0, 0);
        }
        TokenSequence {
            origin_id: self.origin_id.clone(),
            tokens: self.tokens[cut..].to_vec(),
            instruction_starts: starts,
        }
    }

    /// One line per instruction, tokens separated by single spaces.
    pub fn render_lines(&self) -> String {
        let mut out = String::new();
        for ins in self.instructions() {
            out.push_str(&ins.join(" "));
            out.push('\n');
        }
        out
    }
}

/// `query ⊕ [SEP] ⊕ candidate`, left-truncated to the configured budget.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairEncoding {
    pub query_id: String,
    pub candidate_id: String,
    pub tokens: Vec<String>,
    /// Number of leading tokens dropped to fit the budget.
    pub dropped: usize,
    /// Query tokens that survived truncation (the separator sits right after them).
    pub query_kept: usize,
    pub has_separator: bool,
}

impl PairEncoding {
    pub fn truncated(&self) -> bool {
        self.dropped > 0
    }

    pub fn candidate_kept(&self) -> usize {
        self.tokens.len() - self.query_kept - usize::from(self.has_separator)
    }

    /// The query and candidate sides as they survive truncation.
    pub fn sides<'a>(
        &self,
        query: &'a TokenSequence,
        candidate: &'a TokenSequence,
    ) -> (Cow<'a, TokenSequence>, Cow<'a, TokenSequence>) {
        cut_sides(query, candidate, self.query_kept, self.candidate_kept())
    }
}

fn cut_sides<'a>(
    query: &'a TokenSequence,
    candidate: &'a TokenSequence,
    query_kept: usize,
    candidate_kept: usize,
) -> (Cow<'a, TokenSequence>, Cow<'a, TokenSequence>) {
    let side = |seq: &'a TokenSequence, kept: usize| {
        if kept == seq.len() {
            Cow::Borrowed(seq)
        } else {
            Cow::Owned(seq.suffix(kept))
        }
    };
    (side(query, query_kept), side(candidate, candidate_kept))
}

/// `(dropped, query_kept, candidate_kept, has_separator)` under left truncation.
fn pair_layout(
    query_len: usize,
    candidate_len: usize,
    budget: usize,
) -> (usize, usize, usize, bool) {
    let total = query_len + 1 + candidate_len;
    let dropped = total.saturating_sub(budget);
    if dropped <= query_len {
        (dropped, query_len - dropped, candidate_len, true)
    } else {
        (dropped, 0, total - dropped, false)
    }
}

/// What `encode_pair(..).sides(..)` returns, without materializing the pair.
pub fn truncated_sides<'a>(
    query: &'a TokenSequence,
    candidate: &'a TokenSequence,
    cfg: &NormalizeConfig,
) -> (Cow<'a, TokenSequence>, Cow<'a, TokenSequence>) {
    let (_, q, c, _) = pair_layout(query.len(), candidate.len(), cfg.max_pair_tokens);
    cut_sides(query, candidate, q, c)
}

pub fn encode_pair(
    query: &TokenSequence,
    candidate: &TokenSequence,
    cfg: &NormalizeConfig,
) -> PairEncoding {
    let (dropped, query_kept, candidate_kept, has_separator) =
        pair_layout(query.len(), candidate.len(), cfg.max_pair_tokens);
    let mut tokens = Vec::with_capacity(query_kept + usize::from(has_separator) + candidate_kept);
    tokens.extend_from_slice(&query.tokens[query.len() - query_kept..]);
    if has_separator {
        tokens.push(SEP_TOKEN.to_owned());
    }
    tokens.extend_from_slice(&candidate.tokens[candidate.len() - candidate_kept..]);
    PairEncoding {
        query_id: query.origin_id.clone(),
        candidate_id: candidate.origin_id.clone(),
        tokens,
        dropped,
        query_kept,
        has_separator,
    }
}

struct ParsedInstruction<'a> {
    address: u64,
    prefixes: Vec<&'a str>,
    mnemonic: &'a str,
    operands: Vec<&'a str>,
}

fn parse_instruction(index: usize, raw: &str) -> Result<ParsedInstruction<'_>> {
    let err = |reason: &str| Error::Parse {
        index,
        raw: raw.to_owned(),
        reason: reason.to_owned(),
    };
    let line = raw.trim();
    let (addr, rest) = line
        .split_once(char::is_whitespace)
        .ok_or_else(|| err("expected `address mnemonic [operands]`"))?;
    let addr = addr.trim_end_matches(':');
    let addr = addr
        .strip_prefix("0x")
        .or_else(|| addr.strip_prefix("0X"))
        .unwrap_or(addr);
    let address = u64::from_str_radix(addr, 16).map_err(|_| err("bad instruction address"))?;

    let mut rest = rest.trim_start();
    let mut prefixes = Vec::new();
    let mnemonic = loop {
        let (word, tail) = match rest.split_once(char::is_whitespace) {
            Some((w, t)) => (w, t.trim_start()),
            None => (rest, ""),
        };
        if word.is_empty() {
            return Err(err("missing mnemonic"));
        }
        rest = tail;
        if PREFIXES.contains(&word) && !tail.is_empty() {
            prefixes.push(word);
        } else {
            break word;
        }
    };
    if !mnemonic
        .chars()
        .all(|c| c.is_ascii_alphanumeric() || c == '.' || c == '_')
    {
        return Err(err("bad mnemonic"));
    }

    let operands = if rest.trim().is_empty() {
        Vec::new()
    } else {
        let ops: Vec<&str> = rest.split(',').map(str::trim).collect();
        if ops.iter().any(|o| o.is_empty()) {
            return Err(err("empty operand"));
        }
        ops
    };
    Ok(ParsedInstruction {
        address,
        prefixes,
        mnemonic,
        operands,
    })
}

fn parse_decimal(word: &str) -> Option<u64> {
    (!word.is_empty() && word.bytes().all(|b| b.is_ascii_digit()))
        .then(|| word.parse().unwrap_or(u64::MAX))
}

/// Numeric literal in `0x` hex, `h`-suffixed hex or decimal form.
fn parse_literal(word: &str) -> Option<u64> {
    if let Some(hex) = word.strip_prefix("0x").or_else(|| word.strip_prefix("0X")) {
        if hex.is_empty() || !hex.bytes().all(|b| b.is_ascii_hexdigit()) {
            return None;
        }
        return Some(u64::from_str_radix(hex, 16).unwrap_or(u64::MAX));
    }
    if let Some(hex) = word.strip_suffix('h').or_else(|| word.strip_suffix('H')) {
        if !hex.is_empty()
            && hex.as_bytes()[0].is_ascii_digit()
            && hex.bytes().all(|b| b.is_ascii_hexdigit())
        {
            return Some(u64::from_str_radix(hex, 16).unwrap_or(u64::MAX));
        }
    }
    parse_decimal(word)
}

/// Address embedded in an IDA-style auto label such as `loc_401010`.
fn parse_label_address(word: &str) -> Option<u64> {
    IDA_ADDRESS_LABELS.iter().find_map(|p| {
        let hex = word.strip_prefix(p)?;
        (!hex.is_empty() && hex.bytes().all(|b| b.is_ascii_hexdigit()))
            .then(|| u64::from_str_radix(hex, 16).unwrap_or(u64::MAX))
    })
}

struct FunctionContext<'a> {
    base: u64,
    /// Exclusive end of the function's address range.
    end: u64,
    cfg: &'a NormalizeConfig,
}

impl FunctionContext<'_> {
    fn contains(&self, addr: u64) -> bool {
        addr >= self.base && addr < self.end
    }

    fn literal_token(&self, value: u64, rebase: bool) -> String {
        let value = if rebase && self.contains(value) {
            value - self.base
        } else {
            value
        };
        if value > self.cfg.imm_threshold {
            IMM_TOKEN.to_owned()
        } else {
            value.to_string()
        }
    }

    fn push_operand(&self, operand: &str, out: &mut Vec<String>) {
        let mut word = String::new();
        let flush = |word: &mut String, out: &mut Vec<String>| {
            if word.is_empty() {
                return;
            }
            let value = parse_literal(word).or_else(|| parse_label_address(word));
            out.push(match value {
                Some(v) => self.literal_token(v, true),
                None => word.clone(),
            });
            word.clear();
        };
        for ch in operand.chars() {
            if ch.is_whitespace() {
                flush(&mut word, out);
            } else if PUNCTUATION.contains(&ch) {
                flush(&mut word, out);
                out.push(ch.to_string());
            } else {
                word.push(ch);
            }
        }
        flush(&mut word, out);
    }

    fn push_jump_target(&self, site: u64, operand: &str, out: &mut Vec<String>) {
        let target_text = operand
            .strip_prefix("short ")
            .or_else(|| operand.strip_prefix("near "))
            .unwrap_or(operand)
            .trim();
        // objdump: `jne 401010 <main+0x10>`, a bare hex address before the symbol.
        let objdump = target_text
            .split_once('<')
            .filter(|(_, sym)| sym.ends_with('>'))
            .map(|(addr, _)| addr.trim());
        let target = match objdump {
            Some(addr) => {
                let hex = addr.strip_prefix("0x").unwrap_or(addr);
                u64::from_str_radix(hex, 16).ok()
            }
            None => parse_literal(target_text).or_else(|| parse_label_address(target_text)),
        };
        match target {
            Some(t) if self.contains(t) => {
                let d = t as i128 - site as i128;
                let sign = if d < 0 { '-' } else { '+' };
                out.push(format!("{OFFSET_PREFIX}{sign}{}", d.unsigned_abs()));
            }
            // Tail jump into another user function.
            Some(_) if target_text.starts_with("sub_") => out.push(FUNC_TOKEN.to_owned()),
            Some(t) => out.push(self.literal_token(t, false)),
            None => self.push_operand(operand, out),
        }
    }

    fn push_call_target(&self, operand: &str, out: &mut Vec<String>) {
        // objdump renders `call 401a2f <printf@plt>`; the bracketed symbol wins.
        let symbolic = match (operand.find('<'), operand.rfind('>')) {
            (Some(l), Some(r)) if l < r => Some(&operand[l + 1..r]),
            _ => None,
        };
        let name = symbolic.unwrap_or(operand);
        let name = name.split('+').next().unwrap_or(name);
        let name = name
            .strip_suffix("@plt")
            .or_else(|| name.strip_suffix("@PLT"))
            .unwrap_or(name);
        if self.cfg.libc_names.contains(name) {
            out.push(name.to_owned());
            return;
        }
        let indirect = symbolic.is_none()
            && (is_register(name)
                || operand.contains('[')
                || operand.contains(char::is_whitespace));
        if indirect {
            self.push_operand(operand, out);
        } else {
            out.push(FUNC_TOKEN.to_owned());
        }
    }
}

pub fn normalize_function(record: &FunctionRecord, cfg: &NormalizeConfig) -> Result<TokenSequence> {
    let parsed = record
        .instructions
        .iter()
        .enumerate()
        .map(|(i, raw)| parse_instruction(i, raw))
        .collect::<Result<Vec<_>>>()?;

    let last = parsed
        .iter()
        .map(|p| p.address)
        .max()
        .unwrap_or(record.base_address);
    let ctx = FunctionContext {
        base: record.base_address,
        end: last.max(record.base_address).saturating_add(1),
        cfg,
    };

    let mut tokens = Vec::with_capacity(parsed.len() * 3);
    let mut instruction_starts = Vec::with_capacity(parsed.len());
    for ins in &parsed {
        instruction_starts.push(tokens.len());
        tokens.extend(ins.prefixes.iter().map(|p| p.to_string()));
        tokens.push(ins.mnemonic.to_owned());
        let single = ins.operands.len() == 1;
        for op in &ins.operands {
            if single && is_jump_mnemonic(ins.mnemonic) {
                ctx.push_jump_target(ins.address, op, &mut tokens);
            } else if single && is_call_mnemonic(ins.mnemonic) {
                ctx.push_call_target(op, &mut tokens);
            } else {
                ctx.push_operand(op, &mut tokens);
            }
        }
    }
    Ok(TokenSequence {
        origin_id: record.id.clone(),
        tokens,
        instruction_starts,
    })
}

/// Token-level classification used to check the closed-vocabulary property.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass {
    Special,
    Offset,
    Literal,
    Punctuation,
    Word,
}

pub fn classify_token(token: &str, cfg: &NormalizeConfig) -> TokenClass {
    if token == IMM_TOKEN || token == FUNC_TOKEN || token == SEP_TOKEN {
        return TokenClass::Special;
    }
    if let Some(rest) = token.strip_prefix(OFFSET_PREFIX) {
        if let Some(d) = rest.strip_prefix('+').or_else(|| rest.strip_prefix('-')) {
            if parse_decimal(d).is_some() {
                return TokenClass::Offset;
            }
        }
    }
    if let Some(v) = parse_decimal(token) {
        if v <= cfg.imm_threshold {
            return TokenClass::Literal;
        }
    }
    if token.len() == 1 && PUNCTUATION.contains(&token.chars().next().unwrap_or(' ')) {
        return TokenClass::Punctuation;
    }
    TokenClass::Word
}
