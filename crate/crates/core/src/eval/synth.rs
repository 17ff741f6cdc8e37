//! Seeded synthetic corpora that mimic compiler variation.
//!
//! Each equivalence class starts from a random x86-64-looking function. Its
//! variants are derived by renaming registers and by substituting, inserting
//! and deleting instructions, each at `mutation_rate`. Variants get their own
//! base address, so jump targets and in-function literals differ in raw form.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{FunctionRecord, Pool, QuerySet};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub variants_per_class: usize,
    pub mutation_rate: f64,
    pub seed: u64,
    pub min_instructions: usize,
    pub max_instructions: usize,
}

impl SynthConfig {
    pub fn new(classes: usize, variants_per_class: usize, mutation_rate: f64, seed: u64) -> Self {
        Self {
            classes,
            variants_per_class,
            mutation_rate,
            seed,
            min_instructions: 24,
            max_instructions: 72,
        }
    }
}

const REGS: &[&str] = &[
    "rax", "rbx", "rcx", "rdx", "rsi", "rdi", "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15",
];
const FRAME_REGS: &[&str] = &["rbp", "rsp"];
const ALU: &[(&str, u32)] = &[
    ("mov", 30),
    ("add", 8),
    ("sub", 6),
    ("xor", 5),
    ("and", 4),
    ("or", 3),
    ("cmp", 8),
    ("test", 6),
    ("imul", 2),
    ("shl", 2),
    ("shr", 2),
    ("sar", 1),
    ("movzx", 2),
    ("cmovne", 1),
];
const JCC: &[&str] = &["je", "jne", "jg", "jl", "jge", "jle", "ja", "jb", "jmp"];
const LIBC: &[&str] = &[
    "malloc", "free", "memcpy", "memset", "strlen", "strcmp", "strncmp", "printf", "fprintf",
    "snprintf", "fopen", "fclose", "fread", "fwrite", "puts", "calloc", "realloc", "strchr",
    "strcpy", "atoi", "getenv", "qsort", "memcmp", "exit", "abort", "time", "rand", "open",
    "close", "read", "write", "perror", "strdup", "strtol", "sprintf",
];
const COMPILERS: &[&str] = &["gcc", "clang"];
const OPT_LEVELS: &[&str] = &["O0", "O1", "O2", "O3", "Os"];

#[derive(Debug, Clone)]
enum Operand {
    Reg(usize),
    Imm(u64),
    Mem { base: usize, disp: u64 },
}

#[derive(Debug, Clone)]
enum Op {
    Alu(&'static str, Operand, Operand),
    Lea(usize, usize, u64),
    Push(usize),
    Pop(usize),
    Jump(&'static str, u64),
    CallLibc(&'static str),
    CallUser(u64),
    Ret,
    Nop,
}

#[derive(Debug, Clone)]
struct Instr {
    uid: u64,
    op: Op,
}

struct Builder {
    rng: ChaCha8Rng,
    next_uid: u64,
    alu_weights: Vec<u32>,
}

impl Builder {
    fn uid(&mut self) -> u64 {
        self.next_uid += 1;
        self.next_uid
    }

    fn reg(&mut self) -> usize {
        self.rng.gen_range(0..REGS.len())
    }

    fn imm(&mut self) -> u64 {
        match self.rng.gen_range(0..10) {
            0..=5 => self.rng.gen_range(0..16),
            6..=7 => self.rng.gen_range(16..512),
            _ => self.rng.gen_range(5_001..0x10_0000),
        }
    }

    fn alu_mnemonic(&mut self) -> &'static str {
        let total: u32 = self.alu_weights.iter().sum();
        let mut pick = self.rng.gen_range(0..total);
        for (i, w) in self.alu_weights.iter().enumerate() {
            if pick < *w {
                return ALU[i].0;
            }
            pick -= w;
        }
        ALU[0].0
    }

    /// A random instruction; `targets` are uids a jump may refer to.
    fn random_op(&mut self, targets: &[u64]) -> Op {
        match self.rng.gen_range(0..100) {
            0..=54 => {
                let m = self.alu_mnemonic();
                let dst = Operand::Reg(self.reg());
                let src = match self.rng.gen_range(0..3) {
                    0 => Operand::Reg(self.reg()),
                    1 => Operand::Imm(self.imm()),
                    _ => Operand::Mem {
                        base: self.rng.gen_range(0..FRAME_REGS.len()),
                        disp: 8 * self.rng.gen_range(1..16),
                    },
                };
                if self.rng.gen_bool(0.15) {
                    Op::Alu(m, src_as_mem_dst(&src, self), Operand::Reg(self.reg()))
                } else {
                    Op::Alu(m, dst, src)
                }
            }
            55..=61 => Op::Lea(
                self.reg(),
                self.rng.gen_range(0..FRAME_REGS.len()),
                8 * self.rng.gen_range(1..16),
            ),
            62..=66 => Op::Push(self.reg()),
            67..=71 => Op::Pop(self.reg()),
            72..=83 if !targets.is_empty() => {
                let j = JCC[self.rng.gen_range(0..JCC.len())];
                Op::Jump(j, targets[self.rng.gen_range(0..targets.len())])
            }
            72..=91 => Op::CallLibc(LIBC[self.rng.gen_range(0..LIBC.len())]),
            92..=96 => Op::CallUser(0x40_0000 + 16 * self.rng.gen_range(0..0x4000u64)),
            _ => Op::Nop,
        }
    }

    fn base_function(&mut self, len: usize) -> Vec<Instr> {
        let uids: Vec<u64> = (0..len).map(|_| self.uid()).collect();
        let mut body = Vec::with_capacity(len + 3);
        body.push(Instr {
            uid: self.uid(),
            op: Op::Push(REGS.len()),
        });
        for &uid in &uids {
            let op = self.random_op(&uids);
            body.push(Instr { uid, op });
        }
        body.push(Instr {
            uid: self.uid(),
            op: Op::Pop(REGS.len()),
        });
        body.push(Instr {
            uid: self.uid(),
            op: Op::Ret,
        });
        body
    }

    fn mutate(&mut self, base: &[Instr], rate: f64) -> Vec<Instr> {
        let mut rename: Vec<usize> = (0..REGS.len()).collect();
        let movable: Vec<usize> = (0..REGS.len())
            .filter(|_| self.rng.gen_bool(rate))
            .collect();
        let mut shuffled = movable.clone();
        shuffled.shuffle(&mut self.rng);
        for (from, to) in movable.iter().zip(shuffled) {
            rename[*from] = to;
        }

        let targets: Vec<u64> = base.iter().map(|i| i.uid).collect();
        let mut out = Vec::with_capacity(base.len() + 4);
        let last = base.len().saturating_sub(1);
        for (pos, ins) in base.iter().enumerate() {
            // Prologue and epilogue stay fixed.
            let fixed = pos == 0 || pos + 2 > last;
            if !fixed && self.rng.gen_bool(rate) {
                match self.rng.gen_range(0..3) {
                    0 => {
                        let op = self.random_op(&targets);
                        out.push(Instr { uid: ins.uid, op });
                    }
                    1 => {
                        let op = self.random_op(&targets);
                        let uid = self.uid();
                        out.push(Instr { uid, op });
                        out.push(renamed(ins, &rename));
                    }
                    _ => {}
                }
            } else {
                out.push(renamed(ins, &rename));
            }
        }
        out
    }
}

fn src_as_mem_dst(src: &Operand, b: &mut Builder) -> Operand {
    match src {
        Operand::Mem { .. } => src.clone(),
        _ => Operand::Mem {
            base: b.rng.gen_range(0..FRAME_REGS.len()),
            disp: 8 * b.rng.gen_range(1..16),
        },
    }
}

fn renamed(ins: &Instr, map: &[usize]) -> Instr {
    let r = |x: usize| if x < map.len() { map[x] } else { x };
    let op_r = |o: &Operand| match o {
        Operand::Reg(x) => Operand::Reg(r(*x)),
        other => other.clone(),
    };
    let op = match &ins.op {
        Op::Alu(m, a, b) => Op::Alu(m, op_r(a), op_r(b)),
        Op::Lea(d, b, disp) => Op::Lea(r(*d), *b, *disp),
        Op::Push(x) => Op::Push(r(*x)),
        Op::Pop(x) => Op::Pop(r(*x)),
        other => other.clone(),
    };
    Instr { uid: ins.uid, op }
}

fn reg_name(i: usize) -> &'static str {
    REGS.get(i).copied().unwrap_or("rbp")
}

fn hex_or_dec(v: u64) -> String {
    if v < 10 {
        v.to_string()
    } else {
        format!("0x{v:x}")
    }
}

fn render_operand(o: &Operand) -> String {
    match o {
        Operand::Reg(r) => reg_name(*r).to_owned(),
        Operand::Imm(v) => hex_or_dec(*v),
        Operand::Mem { base, disp } => format!("qword ptr [{}-0x{disp:x}]", FRAME_REGS[*base]),
    }
}

fn size_of(op: &Op) -> u64 {
    match op {
        Op::Ret | Op::Nop => 1,
        Op::Push(_) | Op::Pop(_) => 2,
        Op::Jump(..) => 2,
        Op::CallLibc(_) | Op::CallUser(_) => 5,
        Op::Lea(..) => 4,
        Op::Alu(_, _, Operand::Imm(v)) if *v > 127 => 7,
        Op::Alu(..) => 3,
    }
}

/// Lays out the function at `base` and renders `address mnemonic operands` lines.
fn render(body: &[Instr], base: u64) -> Vec<String> {
    let mut addr_of = HashMap::with_capacity(body.len());
    let mut addrs = Vec::with_capacity(body.len());
    let mut addr = base;
    for ins in body {
        addr_of.insert(ins.uid, addr);
        addrs.push(addr);
        addr += size_of(&ins.op);
    }
    let end = *addrs.last().unwrap_or(&base);
    body.iter()
        .zip(&addrs)
        .map(|(ins, &a)| {
            let text = match &ins.op {
                Op::Alu(m, d, s) => format!("{m} {}, {}", render_operand(d), render_operand(s)),
                Op::Lea(d, b, disp) => {
                    format!("lea {}, [{}-0x{disp:x}]", reg_name(*d), FRAME_REGS[*b])
                }
                Op::Push(r) => format!("push {}", reg_name(*r)),
                Op::Pop(r) => format!("pop {}", reg_name(*r)),
                // A deleted jump target falls through to the function's last instruction.
                Op::Jump(m, t) => format!("{m} 0x{:x}", addr_of.get(t).copied().unwrap_or(end)),
                Op::CallLibc(n) => format!("call <{n}@plt>"),
                Op::CallUser(t) => format!("call sub_{t:x}"),
                Op::Ret => "ret".to_owned(),
                Op::Nop => "nop".to_owned(),
            };
            format!("{a:x} {text}")
        })
        .collect()
}

/// Builds `classes × variants_per_class` functions plus one query per class
/// (its first variant). Identical configs give identical corpora.
pub fn generate_synthetic_corpus(cfg: &SynthConfig) -> Result<(Pool, QuerySet)> {
    if !(0.0..1.0).contains(&cfg.mutation_rate) {
        return Err(Error::InvalidArgument(
            "mutation_rate must lie in [0, 1)".into(),
        ));
    }
    if cfg.classes == 0 || cfg.variants_per_class == 0 {
        return Err(Error::InvalidArgument(
            "need at least one class and one variant".into(),
        ));
    }
    if cfg.min_instructions == 0 || cfg.min_instructions > cfg.max_instructions {
        return Err(Error::InvalidArgument(
            "bad instruction length range".into(),
        ));
    }
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        next_uid: 0,
        alu_weights: ALU.iter().map(|(_, w)| *w).collect(),
    };
    let mut records = Vec::with_capacity(cfg.classes * cfg.variants_per_class);
    let mut queries = Vec::with_capacity(cfg.classes);
    for class in 0..cfg.classes {
        let len = b.rng.gen_range(cfg.min_instructions..=cfg.max_instructions);
        let base = b.base_function(len);
        for v in 0..cfg.variants_per_class {
            let body = if cfg.mutation_rate == 0.0 {
                base.clone()
            } else {
                b.mutate(&base, cfg.mutation_rate)
            };
            let base_address = 0x40_0000 + 0x10 * b.rng.gen_range(0..0x1_0000u64);
            let compiler = COMPILERS[v % COMPILERS.len()];
            let opt = OPT_LEVELS[v % OPT_LEVELS.len()];
            let id = format!("c{class:05}_v{v}");
            if v == 0 {
                queries.push(id.clone());
            }
            records.push(FunctionRecord {
                id,
                binary_id: format!("{compiler}-{opt}"),
                source_key: format!("src{class:05}"),
                compiler: compiler.to_owned(),
                opt_level: opt.to_owned(),
                base_address,
                instructions: render(&body, base_address),
            });
        }
    }
    Ok((Pool::new(records)?, QuerySet::from_ids(queries)))
}
