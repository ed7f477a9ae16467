//! x86-64-subset instruction model and the textual fixture format.
//!
//! A fixture is a line-oriented description of a binary image:
//!
//! ```text
//! .func <name> @<hex>            ; begins a function
//! <hex>: <mnemonic> <operands>   ; e.g. 0x1004: mov rdi, rcx
//! .data @<hex>                   ; begins a data run
//! dq <hex>, <hex>, ...           ; consecutive 8-byte words
//! .sym <hex> <name> [<tag>]      ; tag: plain|lock_acquire|lock_release|free|alloc
//! .entry <func-name>             ; marks a COM entry method
//! ```
//!
//! `;` starts a comment. Memory operands: `[reg]`, `[reg+0x8]`, `[reg-0x8]`,
//! `[reg+reg*8+0x10]`, `[rip+0x2000]`. The displacement of a rip-relative
//! operand is the already-resolved absolute target address (disassembler
//! display convention), so parsed images carry no residual rip arithmetic.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// General-purpose registers of the subset. `rsp` is distinguished: it is
/// only legal as the base of stack-slot addressing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Register {
    Rax,
    Rbx,
    Rcx,
    Rdx,
    Rsi,
    Rdi,
    Rbp,
    Rsp,
    R8,
    R9,
    R10,
    R11,
    R12,
    R13,
    R14,
    R15,
}

impl Register {
    pub const ALL: [Register; 16] = [
        Register::Rax,
        Register::Rbx,
        Register::Rcx,
        Register::Rdx,
        Register::Rsi,
        Register::Rdi,
        Register::Rbp,
        Register::Rsp,
        Register::R8,
        Register::R9,
        Register::R10,
        Register::R11,
        Register::R12,
        Register::R13,
        Register::R14,
        Register::R15,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Register::Rax => "rax",
            Register::Rbx => "rbx",
            Register::Rcx => "rcx",
            Register::Rdx => "rdx",
            Register::Rsi => "rsi",
            Register::Rdi => "rdi",
            Register::Rbp => "rbp",
            Register::Rsp => "rsp",
            Register::R8 => "r8",
            Register::R9 => "r9",
            Register::R10 => "r10",
            Register::R11 => "r11",
            Register::R12 => "r12",
            Register::R13 => "r13",
            Register::R14 => "r14",
            Register::R15 => "r15",
        }
    }

    pub fn parse(s: &str) -> Option<Register> {
        Register::ALL.iter().copied().find(|r| r.name() == s)
    }

    /// Volatile under the Windows x64 convention: clobbered by calls.
    pub fn is_volatile(self) -> bool {
        matches!(
            self,
            Register::Rax
                | Register::Rcx
                | Register::Rdx
                | Register::R8
                | Register::R9
                | Register::R10
                | Register::R11
        )
    }
}

impl fmt::Display for Register {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Instruction operand. Rip-relative operands carry the resolved absolute
/// address, never a displacement from the instruction pointer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operand {
    Reg(Register),
    Imm(i64),
    Mem {
        base: Register,
        index: Option<Register>,
        scale: u8,
        disp: i32,
    },
    RipRel(u64),
}

fn fmt_disp(f: &mut fmt::Formatter<'_>, disp: i64, leading: bool) -> fmt::Result {
    if disp < 0 {
        write!(f, "-{:#x}", -(disp as i128))
    } else if leading {
        write!(f, "{disp:#x}")
    } else {
        write!(f, "+{disp:#x}")
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Operand::Reg(r) => write!(f, "{r}"),
            Operand::Imm(v) => fmt_disp(f, v, true),
            Operand::Mem {
                base,
                index,
                scale,
                disp,
            } => {
                write!(f, "[{base}")?;
                if let Some(idx) = index {
                    write!(f, "+{idx}*{scale}")?;
                }
                if disp != 0 {
                    fmt_disp(f, disp as i64, false)?;
                }
                write!(f, "]")
            }
            Operand::RipRel(addr) => write!(f, "[rip+{addr:#x}]"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mnemonic {
    Mov,
    Lea,
    Call,
    Ret,
    Jmp,
    Jcc,
    Cmp,
    Test,
    Add,
    Sub,
    Xor,
    And,
    Neg,
    Sbb,
    Nop,
}

impl Mnemonic {
    pub fn name(self) -> &'static str {
        match self {
            Mnemonic::Mov => "mov",
            Mnemonic::Lea => "lea",
            Mnemonic::Call => "call",
            Mnemonic::Ret => "ret",
            Mnemonic::Jmp => "jmp",
            Mnemonic::Jcc => "jcc",
            Mnemonic::Cmp => "cmp",
            Mnemonic::Test => "test",
            Mnemonic::Add => "add",
            Mnemonic::Sub => "sub",
            Mnemonic::Xor => "xor",
            Mnemonic::And => "and",
            Mnemonic::Neg => "neg",
            Mnemonic::Sbb => "sbb",
            Mnemonic::Nop => "nop",
        }
    }

    fn parse(s: &str) -> Option<Mnemonic> {
        use Mnemonic::*;
        let all = [
            Mov, Lea, Call, Ret, Jmp, Jcc, Cmp, Test, Add, Sub, Xor, And, Neg, Sbb, Nop,
        ];
        all.iter().copied().find(|m| m.name() == s)
    }

    fn operand_count(self) -> std::ops::RangeInclusive<usize> {
        match self {
            Mnemonic::Ret | Mnemonic::Nop => 0..=0,
            Mnemonic::Call | Mnemonic::Jmp | Mnemonic::Jcc | Mnemonic::Neg => 1..=1,
            _ => 2..=2,
        }
    }
}

impl fmt::Display for Mnemonic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub address: u64,
    pub mnemonic: Mnemonic,
    pub operands: Vec<Operand>,
}

impl Instruction {
    /// Direct branch/call target, when the single operand is an immediate
    /// address.
    pub fn direct_target(&self) -> Option<u64> {
        match (self.mnemonic, self.operands.first()) {
            (Mnemonic::Call | Mnemonic::Jmp | Mnemonic::Jcc, Some(&Operand::Imm(t))) => {
                Some(t as u64)
            }
            _ => None,
        }
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}: {}", self.address, self.mnemonic)?;
        for (i, op) in self.operands.iter().enumerate() {
            if i == 0 {
                write!(f, " {op}")?;
            } else {
                write!(f, ", {op}")?;
            }
        }
        Ok(())
    }
}

/// Semantic tag on a symbol address. Tags drive the taint engine: calls to
/// tagged addresses model the Windows synchronization / heap API families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymbolTag {
    Plain,
    LockAcquire,
    LockRelease,
    Free,
    Alloc,
}

impl SymbolTag {
    pub fn name(self) -> &'static str {
        match self {
            SymbolTag::Plain => "plain",
            SymbolTag::LockAcquire => "lock_acquire",
            SymbolTag::LockRelease => "lock_release",
            SymbolTag::Free => "free",
            SymbolTag::Alloc => "alloc",
        }
    }

    pub fn parse(s: &str) -> Option<SymbolTag> {
        use SymbolTag::*;
        [Plain, LockAcquire, LockRelease, Free, Alloc]
            .iter()
            .copied()
            .find(|t| t.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolEntry {
    pub address: u64,
    pub name: String,
    pub tag: SymbolTag,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Function {
    pub name: String,
    pub entry: u64,
    pub instructions: Vec<Instruction>,
}

impl Function {
    pub fn last_address(&self) -> u64 {
        self.instructions.last().map(|i| i.address).unwrap_or(self.entry)
    }

    pub fn contains_address(&self, addr: u64) -> bool {
        self.instructions.iter().any(|i| i.address == addr)
    }
}

/// A parsed fixture. Immutable after parse; safe to share across analysis
/// workers.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryImage {
    pub functions: BTreeMap<String, Function>,
    pub data: BTreeMap<u64, u64>,
    pub symbols: Vec<SymbolEntry>,
    pub entries: Vec<String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}, col {col}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub message: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ImageError {
    #[error("data address {0:#x} not mapped")]
    AddressNotMapped(u64),
}

impl BinaryImage {
    /// Function whose entry address is `addr`.
    pub fn function_at_entry(&self, addr: u64) -> Option<&Function> {
        self.functions.values().find(|f| f.entry == addr)
    }

    /// Function whose address range contains `addr`.
    pub fn function_containing(&self, addr: u64) -> Option<&Function> {
        self.functions.values().find(|f| f.contains_address(addr))
    }

    pub fn instruction_at(&self, addr: u64) -> Option<&Instruction> {
        self.function_containing(addr)
            .and_then(|f| f.instructions.iter().find(|i| i.address == addr))
    }

    pub fn read_data_word(&self, addr: u64) -> Result<u64, ImageError> {
        self.data
            .get(&addr)
            .copied()
            .ok_or(ImageError::AddressNotMapped(addr))
    }

    pub fn symbol_at(&self, addr: u64) -> Option<&SymbolEntry> {
        self.symbols.iter().find(|s| s.address == addr)
    }

    pub fn is_data_address(&self, addr: u64) -> bool {
        self.data.contains_key(&addr)
    }

    pub fn parse(text: &str) -> Result<BinaryImage, ParseError> {
        Parser::new(text).run()
    }

    /// Canonical serializer: emits the fixture grammar byte-exactly
    /// (lowercase hex, single spaces). `parse(serialize(img)) == img`.
    pub fn to_fixture(&self) -> String {
        let mut out = String::new();
        for func in self.functions.values() {
            out.push_str(&format!(".func {} @{:#x}\n", func.name, func.entry));
            for instr in &func.instructions {
                out.push_str(&format!("{instr}\n"));
            }
        }
        // Consecutive 8-byte words are grouped into runs.
        let mut run_start: Option<u64> = None;
        let mut prev: Option<u64> = None;
        let mut words: Vec<u64> = Vec::new();
        let flush = |start: Option<u64>, words: &mut Vec<u64>, out: &mut String| {
            if let Some(s) = start {
                out.push_str(&format!(".data @{s:#x}\ndq "));
                let rendered: Vec<String> = words.iter().map(|w| format!("{w:#x}")).collect();
                out.push_str(&rendered.join(", "));
                out.push('\n');
                words.clear();
            }
        };
        for (&addr, &word) in &self.data {
            match prev {
                Some(p) if addr == p + 8 => {}
                _ => {
                    flush(run_start, &mut words, &mut out);
                    run_start = Some(addr);
                }
            }
            words.push(word);
            prev = Some(addr);
        }
        flush(run_start, &mut words, &mut out);
        for sym in &self.symbols {
            out.push_str(&format!(
                ".sym {:#x} {} {}\n",
                sym.address,
                sym.name,
                sym.tag.name()
            ));
        }
        for entry in &self.entries {
            out.push_str(&format!(".entry {entry}\n"));
        }
        out
    }
}

struct Parser<'a> {
    lines: Vec<&'a str>,
    image: BinaryImage,
    current_func: Option<String>,
    data_cursor: Option<u64>,
    symbol_addrs: BTreeMap<u64, usize>,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        Parser {
            lines: text.lines().collect(),
            image: BinaryImage::default(),
            current_func: None,
            data_cursor: None,
            symbol_addrs: BTreeMap::new(),
        }
    }

    fn err<T>(&self, line: usize, col: usize, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError {
            line,
            col,
            message: message.into(),
        })
    }

    fn run(mut self) -> Result<BinaryImage, ParseError> {
        for lineno in 0..self.lines.len() {
            let raw = self.lines[lineno];
            let line = match raw.find(';') {
                Some(i) => &raw[..i],
                None => raw,
            };
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            let col = line.len() - line.trim_start().len() + 1;
            let n = lineno + 1;
            if let Some(rest) = trimmed.strip_prefix(".func ") {
                self.parse_func(n, col, rest.trim())?;
            } else if let Some(rest) = trimmed.strip_prefix(".data ") {
                self.parse_data(n, col, rest.trim())?;
            } else if let Some(rest) = trimmed.strip_prefix("dq ") {
                self.parse_dq(n, col, rest.trim())?;
            } else if let Some(rest) = trimmed.strip_prefix(".sym ") {
                self.parse_sym(n, col, rest.trim())?;
            } else if let Some(rest) = trimmed.strip_prefix(".entry ") {
                self.parse_entry(n, col, rest.trim())?;
            } else if trimmed.starts_with('.') {
                self.err(n, col, format!("unknown directive `{trimmed}`"))?;
            } else {
                self.parse_instruction(n, col, trimmed)?;
            }
        }
        self.finish()
    }

    fn parse_hex(&self, line: usize, col: usize, s: &str) -> Result<u64, ParseError> {
        let t = s.trim();
        let body = t
            .strip_prefix("0x")
            .or_else(|| t.strip_prefix("0X"))
            .unwrap_or(t);
        let radix = if body.len() < t.len() { 16 } else { 10 };
        u64::from_str_radix(body, radix)
            .map_err(|_| ParseError {
                line,
                col,
                message: format!("bad numeric literal `{t}`"),
            })
    }

    fn parse_signed(&self, line: usize, col: usize, s: &str) -> Result<i64, ParseError> {
        let t = s.trim();
        if let Some(rest) = t.strip_prefix('-') {
            Ok(-(self.parse_hex(line, col, rest)? as i64))
        } else {
            Ok(self.parse_hex(line, col, t)? as i64)
        }
    }

    fn parse_func(&mut self, line: usize, col: usize, rest: &str) -> Result<(), ParseError> {
        let (name, addr) = match rest.split_once('@') {
            Some((n, a)) => (n.trim(), a.trim()),
            None => return self.err(line, col, ".func requires `<name> @<hex>`"),
        };
        if name.is_empty() || name.contains(char::is_whitespace) {
            return self.err(line, col, format!("bad function name `{name}`"));
        }
        let entry = self.parse_hex(line, col, addr)?;
        if self.image.functions.contains_key(name) {
            return self.err(line, col, format!("duplicate function `{name}`"));
        }
        if self.image.functions.values().any(|f| f.entry == entry) {
            return self.err(line, col, format!("duplicate function address {entry:#x}"));
        }
        self.image.functions.insert(
            name.to_string(),
            Function {
                name: name.to_string(),
                entry,
                instructions: Vec::new(),
            },
        );
        self.current_func = Some(name.to_string());
        self.data_cursor = None;
        Ok(())
    }

    fn parse_data(&mut self, line: usize, col: usize, rest: &str) -> Result<(), ParseError> {
        let addr_str = match rest.strip_prefix('@') {
            Some(a) => a.trim(),
            None => return self.err(line, col, ".data requires `@<hex>`"),
        };
        let addr = self.parse_hex(line, col, addr_str)?;
        if addr % 8 != 0 {
            return self.err(line, col, format!("data address {addr:#x} not 8-aligned"));
        }
        self.data_cursor = Some(addr);
        self.current_func = None;
        Ok(())
    }

    fn parse_dq(&mut self, line: usize, col: usize, rest: &str) -> Result<(), ParseError> {
        let mut cursor = match self.data_cursor {
            Some(c) => c,
            None => return self.err(line, col, "dq outside a .data run"),
        };
        for part in rest.split(',') {
            let word = self.parse_hex(line, col, part)?;
            if self.image.data.contains_key(&cursor) {
                return self.err(line, col, format!("data word at {cursor:#x} already defined"));
            }
            self.image.data.insert(cursor, word);
            cursor += 8;
        }
        self.data_cursor = Some(cursor);
        Ok(())
    }

    fn parse_sym(&mut self, line: usize, col: usize, rest: &str) -> Result<(), ParseError> {
        let mut parts = rest.split_whitespace();
        let addr = match parts.next() {
            Some(a) => self.parse_hex(line, col, a)?,
            None => return self.err(line, col, ".sym requires `<hex> <name> [<tag>]`"),
        };
        let name = match parts.next() {
            Some(n) => n.to_string(),
            None => return self.err(line, col, ".sym requires a symbol name"),
        };
        let tag = match parts.next() {
            Some(t) => match SymbolTag::parse(t) {
                Some(tag) => tag,
                None => return self.err(line, col, format!("unknown symbol tag `{t}`")),
            },
            None => SymbolTag::Plain,
        };
        if parts.next().is_some() {
            return self.err(line, col, "trailing tokens after .sym tag");
        }
        if self.symbol_addrs.contains_key(&addr) {
            return self.err(line, col, format!("duplicate symbol at {addr:#x}"));
        }
        self.symbol_addrs.insert(addr, self.image.symbols.len());
        self.image.symbols.push(SymbolEntry { address: addr, name, tag });
        Ok(())
    }

    fn parse_entry(&mut self, line: usize, col: usize, rest: &str) -> Result<(), ParseError> {
        let name = rest.trim();
        if name.is_empty() || name.contains(char::is_whitespace) {
            return self.err(line, col, format!("bad entry name `{name}`"));
        }
        self.image.entries.push(name.to_string());
        Ok(())
    }

    fn parse_instruction(&mut self, line: usize, col: usize, text: &str) -> Result<(), ParseError> {
        let func_name = match &self.current_func {
            Some(f) => f.clone(),
            None => return self.err(line, col, "instruction outside a .func block"),
        };
        let (addr_str, rest) = match text.split_once(':') {
            Some(x) => x,
            None => return self.err(line, col, "instruction requires `<hex>: <mnemonic> ...`"),
        };
        let address = self.parse_hex(line, col, addr_str)?;
        let rest = rest.trim();
        let (mn_str, ops_str) = match rest.split_once(char::is_whitespace) {
            Some((m, o)) => (m, o.trim()),
            None => (rest, ""),
        };
        let mnemonic = match Mnemonic::parse(mn_str) {
            Some(m) => m,
            None => return self.err(line, col, format!("unknown mnemonic `{mn_str}`")),
        };
        let mut operands = Vec::new();
        if !ops_str.is_empty() {
            for part in ops_str.split(',') {
                operands.push(self.parse_operand(line, col, part.trim())?);
            }
        }
        if !mnemonic.operand_count().contains(&operands.len()) {
            return self.err(
                line,
                col,
                format!("`{mn_str}` takes {:?} operands, got {}", mnemonic.operand_count(), operands.len()),
            );
        }
        if mnemonic == Mnemonic::Mov
            && operands
                .iter()
                .filter(|o| matches!(o, Operand::Mem { .. } | Operand::RipRel(_)))
                .count()
                > 1
        {
            return self.err(line, col, "mov with two memory operands");
        }
        let func = &self.image.functions[&func_name];
        if func.instructions.is_empty() {
            if address != func.entry {
                return self.err(
                    line,
                    col,
                    format!("first instruction at {address:#x} does not match entry {:#x}", func.entry),
                );
            }
        } else if address <= func.last_address() {
            return self.err(
                line,
                col,
                format!("instruction address {address:#x} not strictly increasing"),
            );
        }
        self.image
            .functions
            .get_mut(&func_name)
            .unwrap()
            .instructions
            .push(Instruction {
                address,
                mnemonic,
                operands,
            });
        Ok(())
    }

    fn parse_operand(&self, line: usize, col: usize, s: &str) -> Result<Operand, ParseError> {
        if s.is_empty() {
            return self.err(line, col, "empty operand");
        }
        if let Some(body) = s.strip_prefix('[').and_then(|x| x.strip_suffix(']')) {
            return self.parse_memory(line, col, body.trim());
        }
        if let Some(r) = Register::parse(s) {
            return Ok(Operand::Reg(r));
        }
        if s.starts_with("0x") || s.starts_with('-') || s.chars().next().is_some_and(|c| c.is_ascii_digit()) {
            return Ok(Operand::Imm(self.parse_signed(line, col, s)?));
        }
        self.err(line, col, format!("unknown register `{s}`"))
    }

    fn parse_memory(&self, line: usize, col: usize, body: &str) -> Result<Operand, ParseError> {
        // Split on +/- while keeping the sign attached to each term.
        let mut terms: Vec<(char, String)> = Vec::new();
        let mut sign = '+';
        let mut cur = String::new();
        for c in body.chars() {
            match c {
                '+' | '-' => {
                    if !cur.trim().is_empty() {
                        terms.push((sign, cur.trim().to_string()));
                    }
                    sign = c;
                    cur = String::new();
                }
                _ => cur.push(c),
            }
        }
        if !cur.trim().is_empty() {
            terms.push((sign, cur.trim().to_string()));
        }
        if terms.is_empty() {
            return self.err(line, col, "empty memory operand");
        }
        if terms[0].1 == "rip" {
            if terms.len() != 2 || terms[1].0 != '+' {
                return self.err(line, col, "rip-relative operand requires `[rip+<hex>]`");
            }
            let addr = self.parse_hex(line, col, &terms[1].1)?;
            return Ok(Operand::RipRel(addr));
        }
        let base = match Register::parse(&terms[0].1) {
            Some(r) if terms[0].0 == '+' => r,
            _ => return self.err(line, col, format!("bad memory base `{}`", terms[0].1)),
        };
        let mut index = None;
        let mut scale = 1u8;
        let mut disp: i64 = 0;
        for (sg, term) in &terms[1..] {
            if let Some((reg_s, scale_s)) = term.split_once('*') {
                if index.is_some() {
                    return self.err(line, col, "memory operand with two index registers");
                }
                let idx = match Register::parse(reg_s.trim()) {
                    Some(r) if *sg == '+' && r != Register::Rsp => r,
                    _ => return self.err(line, col, format!("bad index register `{reg_s}`")),
                };
                let sc = self.parse_hex(line, col, scale_s)?;
                if ![1, 2, 4, 8].contains(&sc) {
                    return self.err(line, col, format!("scale must be 1/2/4/8, got {sc}"));
                }
                index = Some(idx);
                scale = sc as u8;
            } else if let Some(r) = Register::parse(term) {
                if index.is_some() {
                    return self.err(line, col, "memory operand with two index registers");
                }
                if *sg != '+' || r == Register::Rsp {
                    return self.err(line, col, format!("bad index register `{term}`"));
                }
                index = Some(r);
                scale = 1;
            } else {
                let v = self.parse_hex(line, col, term)? as i64;
                let signed = if *sg == '-' { -v } else { v };
                disp = disp.checked_add(signed).ok_or(ParseError {
                    line,
                    col,
                    message: "displacement overflow".into(),
                })?;
            }
        }
        let disp32 = i32::try_from(disp).map_err(|_| ParseError {
            line,
            col,
            message: format!("displacement {disp:#x} exceeds 32 bits"),
        })?;
        Ok(Operand::Mem {
            base,
            index,
            scale,
            disp: disp32,
        })
    }

    fn finish(self) -> Result<BinaryImage, ParseError> {
        let image = self.image;
        // Function address ranges must be pairwise disjoint.
        let mut ranges: Vec<(u64, u64, &str)> = image
            .functions
            .values()
            .map(|f| (f.entry, f.last_address(), f.name.as_str()))
            .collect();
        ranges.sort();
        for pair in ranges.windows(2) {
            let (_, end_a, name_a) = pair[0];
            let (start_b, _, name_b) = pair[1];
            if start_b <= end_a {
                return Err(ParseError {
                    line: 0,
                    col: 0,
                    message: format!("functions `{name_a}` and `{name_b}` overlap"),
                });
            }
        }
        for entry in &image.entries {
            if !image.functions.contains_key(entry) {
                return Err(ParseError {
                    line: 0,
                    col: 0,
                    message: format!(".entry `{entry}` references missing function"),
                });
            }
        }
        Ok(image)
    }
}
