//! Random structured TLA programs for differential and structural tests.
//!
//! Every generated function keeps one working value on top of its stack and
//! each statement leaves the depth unchanged, so programs always pass the
//! stack check. Loops count the working value down: their bodies only use
//! statements that never increase it and end with a strictly positive
//! decrement, so every run terminates.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttvm_core::{assemble, Program};

const CALLS: [&str; 3] = ["CALL", "CALL_NORMAL", "CALL_JIT"];

struct Gen {
    rng: ChaCha8Rng,
    out: Vec<String>,
    labels: usize,
    nfuncs: usize,
    /// Which functions never increase their argument.
    monotone: Vec<bool>,
    current: usize,
}

impl Gen {
    fn label(&mut self) -> String {
        self.labels += 1;
        format!("l{}", self.labels)
    }

    fn emit(&mut self, line: impl Into<String>) {
        self.out.push(line.into());
    }

    fn place(&mut self, label: &str) {
        self.out.push(format!("{label}:"));
    }

    fn small(&mut self) -> u8 {
        self.rng.gen_range(0..=20)
    }

    /// A condition that consumes nothing and leaves a value for JUMP_IF on
    /// top of the working value.
    fn condition(&mut self) {
        match self.rng.gen_range(0..4) {
            0 | 1 => {
                let k = self.rng.gen_range(0..=60);
                self.emit("DUP");
                self.emit(format!("CONST_INT {k}"));
                self.emit("LT");
            }
            2 => {
                let k = self.small();
                self.emit("DUP");
                self.emit(format!("CONST_INT {k}"));
                self.emit("EQ");
            }
            _ => self.emit("DUP"),
        }
    }

    fn call_target(&mut self, monotone_only: bool) -> Option<usize> {
        let later: Vec<usize> = (self.current + 1..self.nfuncs)
            .filter(|&f| !monotone_only || self.monotone[f])
            .collect();
        if later.is_empty() {
            None
        } else {
            Some(later[self.rng.gen_range(0..later.len())])
        }
    }

    fn terminate(&mut self) {
        if self.current == 0 {
            self.emit("EXIT");
        } else {
            self.emit("RET 1");
        }
    }

    /// One depth-preserving statement. With `monotone` set the working value
    /// never increases.
    fn stmt(&mut self, depth: usize, monotone: bool) {
        let nested = depth < 3;
        let choice = self.rng.gen_range(0..100);
        match choice {
            0..=19 => {
                let k = self.small();
                self.emit(format!("CONST_INT {k}"));
                self.emit("SUB");
            }
            20..=34 if !monotone => {
                let k = self.small();
                self.emit(format!("CONST_INT {k}"));
                self.emit("ADD");
            }
            35..=39 if !monotone => {
                self.emit("DUP");
                self.emit("ADD");
            }
            40..=44 => {
                let k = self.small();
                self.emit(format!("CONST_INT {k}"));
                self.emit("POP");
            }
            45..=64 if nested => {
                let (other, end) = (self.label(), self.label());
                self.condition();
                self.emit(format!("JUMP_IF {other}"));
                self.block(depth + 1, monotone);
                self.emit(format!("JUMP {end}"));
                self.place(&other);
                self.block(depth + 1, monotone);
                self.place(&end);
            }
            65..=69 if nested => {
                // One-armed if.
                let end = self.label();
                self.condition();
                self.emit(format!("JUMP_IF {end}"));
                self.block(depth + 1, monotone);
                self.place(&end);
            }
            70..=81 if nested => self.counted_loop(depth),
            82..=86 if nested => self.do_while(depth),
            87..=95 => match self.call_target(monotone) {
                Some(f) => {
                    let op = CALLS[self.rng.gen_range(0..3)];
                    self.emit(format!("{op} f{f}"));
                }
                None => {
                    self.emit("CONST_INT 1");
                    self.emit("SUB");
                }
            },
            96..=99 if nested => {
                // Early exit from the function on one arm.
                let end = self.label();
                self.condition();
                self.emit(format!("JUMP_IF {end}"));
                let k = self.small();
                self.emit(format!("CONST_INT {k}"));
                self.emit(if monotone { "SUB" } else { "ADD" });
                self.terminate();
                self.place(&end);
            }
            _ => {
                self.emit("CONST_INT 0");
                self.emit("ADD");
            }
        }
    }

    fn block(&mut self, depth: usize, monotone: bool) {
        let n = self.rng.gen_range(1..=3);
        for _ in 0..n {
            self.stmt(depth, monotone);
        }
    }

    /// `while value >= t { body; value -= d }`
    fn counted_loop(&mut self, depth: usize) {
        let (head, exit) = (self.label(), self.label());
        let t = self.rng.gen_range(0..=10);
        let d = self.rng.gen_range(1..=3);
        self.place(&head);
        self.emit("DUP");
        self.emit(format!("CONST_INT {t}"));
        self.emit("LT");
        self.emit(format!("JUMP_IF {exit}"));
        self.block(depth + 1, true);
        self.emit(format!("CONST_INT {d}"));
        self.emit("SUB");
        self.emit(format!("JUMP {head}"));
        self.place(&exit);
    }

    /// `do { body; value -= d } while !(value < t)`
    fn do_while(&mut self, depth: usize) {
        let (head, exit) = (self.label(), self.label());
        let t = self.rng.gen_range(0..=10);
        let d = self.rng.gen_range(1..=3);
        self.place(&head);
        self.block(depth + 1, true);
        self.emit(format!("CONST_INT {d}"));
        self.emit("SUB");
        self.emit("DUP");
        self.emit(format!("CONST_INT {t}"));
        self.emit("LT");
        self.emit(format!("JUMP_IF {exit}"));
        self.emit(format!("JUMP {head}"));
        self.place(&exit);
    }

    fn function(&mut self, index: usize) {
        self.current = index;
        let monotone = self.monotone[index];
        self.place(&format!("f{index}"));
        let n = self.rng.gen_range(1..=4);
        for _ in 0..n {
            self.stmt(0, monotone);
        }
        self.terminate();
    }
}

/// Assembly source for the program generated from `seed`.
pub fn source(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nfuncs = rng.gen_range(1..=3);
    let monotone = (0..nfuncs).map(|i| i > 0 && rng.gen_bool(0.5)).collect();
    let mut g = Gen {
        rng,
        out: Vec::new(),
        labels: 0,
        nfuncs,
        monotone,
        current: 0,
    };
    for f in 0..nfuncs {
        g.function(f);
    }
    g.out.join("\n")
}

/// A valid program from `seed`. Seeds whose program would not fit in the
/// one-byte address space are skipped by moving to the next seed.
pub fn program(seed: u64) -> (u64, Program) {
    let mut s = seed;
    loop {
        if let Ok(p) = assemble(&source(s)) {
            if ttvm_core::validate(&p).is_valid() {
                return (s, p);
            }
        }
        s = s.wrapping_add(0x9E37_79B9);
    }
}

/// The `n` programs of the fixed random suite.
pub fn suite(n: usize) -> Vec<(u64, Program)> {
    (0..n as u64).map(|i| program(i * 7919 + 1)).collect()
}
