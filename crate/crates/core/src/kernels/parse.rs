//! Textual grammar for kernel expressions, used by the CLI config.
//!
//! Grammar (whitespace insensitive):
//!
//! ```text
//! expr     := call
//! call     := name '(' args ')'
//! args     := (arg (',' arg)*)?
//! arg      := key '=' number | expr
//! name     := white | dot | brownian | se | powexp | rq | matern | sum | prod | spacetime
//! ```
//!
//! Examples: `sum(matern(s2=1,l=700,nu=1.5), white(s2=0.01))`,
//! `spacetime(matern(s2=1,l=3000,nu=1.5), matern(s2=1,l=6,nu=1.5))`.

use super::{Kernel, MaternNu};
use crate::error::{Error, Result};

struct Parser<'a> {
    input: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.input.len() && self.input[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.input.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(Error::Parse(format!(
                "expected '{}' at offset {} in kernel expression",
                c as char, self.pos
            )))
        }
    }

    fn ident(&mut self) -> Result<String> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.input.len()
            && (self.input[self.pos].is_ascii_alphanumeric() || self.input[self.pos] == b'_')
        {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::Parse(format!("expected identifier at offset {start}")));
        }
        Ok(std::str::from_utf8(&self.input[start..self.pos])
            .unwrap()
            .to_string())
    }

    fn number(&mut self) -> Result<f64> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.input.len()
            && matches!(self.input[self.pos], b'0'..=b'9' | b'.' | b'-' | b'+' | b'e' | b'E')
        {
            self.pos += 1;
        }
        std::str::from_utf8(&self.input[start..self.pos])
            .unwrap()
            .parse::<f64>()
            .map_err(|_| Error::Parse(format!("invalid number at offset {start}")))
    }

    fn call(&mut self) -> Result<Kernel> {
        let name = self.ident()?;
        self.expect(b'(')?;
        let mut kv: Vec<(String, f64)> = Vec::new();
        let mut children: Vec<Kernel> = Vec::new();
        if self.peek() != Some(b')') {
            loop {
                // key=value if an identifier is followed by '=', else nested call
                let save = self.pos;
                if let Ok(id) = self.ident() {
                    if self.peek() == Some(b'=') {
                        self.pos += 1;
                        kv.push((id, self.number()?));
                    } else {
                        self.pos = save;
                        children.push(self.call()?);
                    }
                } else {
                    return Err(Error::Parse(format!("expected argument at offset {}", self.pos)));
                }
                match self.peek() {
                    Some(b',') => {
                        self.pos += 1;
                    }
                    _ => break,
                }
            }
        }
        self.expect(b')')?;
        build(&name, &kv, children)
    }
}

fn get(kv: &[(String, f64)], key: &str, kernel: &str) -> Result<f64> {
    kv.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::Parse(format!("kernel '{kernel}' is missing parameter '{key}'")))
}

fn build(name: &str, kv: &[(String, f64)], children: Vec<Kernel>) -> Result<Kernel> {
    let k = match name {
        "white" => Kernel::WhiteNoise { s2: get(kv, "s2", name)? },
        "dot" => Kernel::DotProduct {
            s2_slope: get(kv, "s2", name)?,
            t0: get(kv, "t0", name).unwrap_or(0.0),
        },
        "brownian" => Kernel::Brownian {
            q: get(kv, "q", name)?,
            t0: get(kv, "t0", name).unwrap_or(0.0),
        },
        "se" => Kernel::SquaredExponential { s2: get(kv, "s2", name)?, l: get(kv, "l", name)? },
        "powexp" => Kernel::PoweredExponential {
            nu2: get(kv, "nu2", name)?,
            rho: get(kv, "rho", name)?,
            kappa: get(kv, "kappa", name)?,
        },
        "rq" => Kernel::RationalQuadratic {
            c: get(kv, "c", name)?,
            alpha: get(kv, "alpha", name)?,
            tau: get(kv, "tau", name)?,
        },
        "matern" => {
            let nu = get(kv, "nu", name)?;
            let nu = if (nu - 0.5).abs() < 1e-9 {
                MaternNu::Half
            } else if (nu - 1.5).abs() < 1e-9 {
                MaternNu::ThreeHalves
            } else if (nu - 2.5).abs() < 1e-9 {
                MaternNu::FiveHalves
            } else {
                return Err(Error::Parse(format!(
                    "matern nu must be one of 0.5, 1.5, 2.5 (got {nu})"
                )));
            };
            Kernel::Matern { s2: get(kv, "s2", name)?, l: get(kv, "l", name)?, nu }
        }
        "sum" => {
            if children.is_empty() {
                return Err(Error::Parse("sum() needs at least one child kernel".into()));
            }
            Kernel::Sum(children)
        }
        "prod" => {
            if children.is_empty() {
                return Err(Error::Parse("prod() needs at least one child kernel".into()));
            }
            Kernel::Product(children)
        }
        "spacetime" => {
            if children.len() != 2 {
                return Err(Error::Parse(
                    "spacetime(temporal, spatial) needs exactly two child kernels".into(),
                ));
            }
            let mut it = children.into_iter();
            Kernel::SeparableSpaceTime {
                temporal: Box::new(it.next().unwrap()),
                spatial: Box::new(it.next().unwrap()),
            }
        }
        other => return Err(Error::Parse(format!("unknown kernel '{other}'"))),
    };
    k.validate()?;
    Ok(k)
}

/// Parse a kernel expression from the documented textual grammar.
pub fn parse_kernel(text: &str) -> Result<Kernel> {
    let mut p = Parser { input: text.as_bytes(), pos: 0 };
    let k = p.call()?;
    p.skip_ws();
    if p.pos != p.input.len() {
        return Err(Error::Parse(format!(
            "trailing input at offset {} in kernel expression",
            p.pos
        )));
    }
    Ok(k)
}
