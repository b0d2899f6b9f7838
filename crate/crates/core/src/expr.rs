//! A small expression language for sampling scalar fields at surface nodes.
//!
//! Grammar (usual precedence, `^` binds tightest and is right associative):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := ('-' | '+') unary | power
//! power  := atom ('^' unary)?
//! atom   := number | ident | call | '(' expr ')'
//! call   := ('sin' | 'cos') '(' expr ')' | 'pow' '(' expr ',' expr ')'
//! ```
//!
//! Identifiers are the node coordinates `x`, `y`, `z`, the constant `pi`, and
//! the torus periods `Lx`, `Ly` when the surface provides them.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    X,
    Y,
    Z,
    Lx,
    Ly,
}

/// Values bound to the identifiers during evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Bindings {
    pub point: [f64; 3],
    pub periods: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Op(char),
}

fn tokenize(src: &str) -> Result<Vec<Token>> {
    let mut tokens = Vec::new();
    let chars: Vec<char> = src.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            // exponent part, e.g. 1e-3
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let value = text
                .parse::<f64>()
                .map_err(|_| Error::UnsupportedExpression(format!("bad number '{text}'")))?;
            tokens.push(Token::Num(value));
        } else if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            tokens.push(Token::Ident(chars[start..i].iter().collect()));
        } else if "+-*/^(),".contains(c) {
            tokens.push(Token::Op(c));
            i += 1;
        } else if c == 'π' {
            tokens.push(Token::Ident("pi".into()));
            i += 1;
        } else {
            return Err(Error::UnsupportedExpression(format!(
                "unexpected character '{c}'"
            )));
        }
    }
    Ok(tokens)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expect(&mut self, op: char) -> Result<()> {
        match self.next() {
            Some(Token::Op(c)) if c == op => Ok(()),
            other => Err(Error::UnsupportedExpression(format!(
                "expected '{op}', found {other:?}"
            ))),
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        while let Some(Token::Op(c @ ('+' | '-'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if c == '+' {
                Expr::Add(Box::new(lhs), Box::new(rhs))
            } else {
                Expr::Sub(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        while let Some(Token::Op(c @ ('*' | '/'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = if c == '*' {
                Expr::Mul(Box::new(lhs), Box::new(rhs))
            } else {
                Expr::Div(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        match self.peek() {
            Some(Token::Op('-')) => {
                self.pos += 1;
                Ok(Expr::Neg(Box::new(self.unary()?)))
            }
            Some(Token::Op('+')) => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if let Some(Token::Op('^')) = self.peek() {
            self.pos += 1;
            let exponent = self.unary()?;
            return Ok(Expr::Pow(Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.next() {
            Some(Token::Num(v)) => Ok(Expr::Num(v)),
            Some(Token::Op('(')) => {
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Some(Token::Ident(name)) => {
                if let Some(Token::Op('(')) = self.peek() {
                    self.pos += 1;
                    return self.call(&name);
                }
                match name.as_str() {
                    "x" => Ok(Expr::Var(Var::X)),
                    "y" => Ok(Expr::Var(Var::Y)),
                    "z" => Ok(Expr::Var(Var::Z)),
                    "Lx" => Ok(Expr::Var(Var::Lx)),
                    "Ly" => Ok(Expr::Var(Var::Ly)),
                    "pi" => Ok(Expr::Num(std::f64::consts::PI)),
                    _ => Err(Error::UnsupportedExpression(format!(
                        "unknown identifier '{name}'"
                    ))),
                }
            }
            other => Err(Error::UnsupportedExpression(format!(
                "unexpected token {other:?}"
            ))),
        }
    }

    fn call(&mut self, name: &str) -> Result<Expr> {
        let e = match name {
            "sin" => Expr::Sin(Box::new(self.expr()?)),
            "cos" => Expr::Cos(Box::new(self.expr()?)),
            "pow" => {
                let base = self.expr()?;
                self.expect(',')?;
                let exponent = self.expr()?;
                Expr::Pow(Box::new(base), Box::new(exponent))
            }
            _ => {
                return Err(Error::UnsupportedExpression(format!(
                    "unsupported function '{name}'"
                )))
            }
        };
        self.expect(')')?;
        Ok(e)
    }
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr> {
        let tokens = tokenize(src)?;
        if tokens.is_empty() {
            return Err(Error::UnsupportedExpression("empty expression".into()));
        }
        let mut parser = Parser { tokens, pos: 0 };
        let e = parser.expr()?;
        if parser.pos != parser.tokens.len() {
            return Err(Error::UnsupportedExpression(format!(
                "trailing input after token {}",
                parser.pos
            )));
        }
        Ok(e)
    }

    /// Whether the expression needs torus periods to evaluate.
    pub fn uses_periods(&self) -> bool {
        match self {
            Expr::Num(_) => false,
            Expr::Var(v) => matches!(v, Var::Lx | Var::Ly),
            Expr::Neg(a) | Expr::Sin(a) | Expr::Cos(a) => a.uses_periods(),
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Pow(a, b) => a.uses_periods() || b.uses_periods(),
        }
    }

    pub fn eval(&self, env: &Bindings) -> Result<f64> {
        Ok(match self {
            Expr::Num(v) => *v,
            Expr::Var(Var::X) => env.point[0],
            Expr::Var(Var::Y) => env.point[1],
            Expr::Var(Var::Z) => env.point[2],
            Expr::Var(Var::Lx) => env.periods.map(|p| p.0).ok_or_else(no_periods)?,
            Expr::Var(Var::Ly) => env.periods.map(|p| p.1).ok_or_else(no_periods)?,
            Expr::Neg(a) => -a.eval(env)?,
            Expr::Add(a, b) => a.eval(env)? + b.eval(env)?,
            Expr::Sub(a, b) => a.eval(env)? - b.eval(env)?,
            Expr::Mul(a, b) => a.eval(env)? * b.eval(env)?,
            Expr::Div(a, b) => a.eval(env)? / b.eval(env)?,
            Expr::Pow(a, b) => a.eval(env)?.powf(b.eval(env)?),
            Expr::Sin(a) => a.eval(env)?.sin(),
            Expr::Cos(a) => a.eval(env)?.cos(),
        })
    }
}

fn no_periods() -> Error {
    Error::UnsupportedExpression("Lx/Ly are only defined on torus grids".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(x: f64, y: f64) -> Bindings {
        Bindings {
            point: [x, y, 0.0],
            periods: Some((2.0, 3.0)),
        }
    }

    #[test]
    fn precedence_and_associativity() {
        let e = Expr::parse("1 + 2 * 3 - 4 / 2").unwrap();
        assert_eq!(e.eval(&at(0.0, 0.0)).unwrap(), 5.0);
        let e = Expr::parse("2^3^2").unwrap();
        assert_eq!(e.eval(&at(0.0, 0.0)).unwrap(), 512.0);
        let e = Expr::parse("-2^2").unwrap();
        assert_eq!(e.eval(&at(0.0, 0.0)).unwrap(), -4.0);
    }

    #[test]
    fn functions_and_identifiers() {
        let e = Expr::parse("cos(2*pi*x/Lx) + pow(y, 2) + sin(0)").unwrap();
        let v = e.eval(&at(0.5, 3.0)).unwrap();
        assert!((v - ((std::f64::consts::PI * 0.5).cos() + 9.0)).abs() < 1e-15);
        assert!(e.uses_periods());
        let e = Expr::parse("1.5e-1*x").unwrap();
        assert!((e.eval(&at(2.0, 0.0)).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn rejects_unsupported() {
        assert!(matches!(
            Expr::parse("bessel(x)"),
            Err(Error::UnsupportedExpression(_))
        ));
        assert!(Expr::parse("exp(x)").is_err());
        assert!(Expr::parse("x +").is_err());
        assert!(Expr::parse("(x").is_err());
        assert!(Expr::parse("w").is_err());
        assert!(Expr::parse("").is_err());
        assert!(Expr::parse("x $ y").is_err());
    }

    #[test]
    fn periods_missing_on_mesh() {
        let e = Expr::parse("x/Lx").unwrap();
        let env = Bindings {
            point: [1.0, 0.0, 0.0],
            periods: None,
        };
        assert!(e.eval(&env).is_err());
    }
}
