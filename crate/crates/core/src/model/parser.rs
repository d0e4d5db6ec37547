//! Recursive-descent parser for the right-hand sides of `dot(state)=...;` lines.
//!
//! Precedence, from loosest to tightest: `+ -`, `* /`, `^` (right associative),
//! unary `- +`, then literals, identifiers, calls and parentheses.

use super::expr::{BinOp, Expr, Func, Symbol};
use super::ModelError;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
}

pub(crate) struct ExprParser<'a> {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    line: usize,
    end_col: usize,
    resolve: &'a dyn Fn(&str) -> Option<Symbol>,
}

fn lex(src: &str, line: usize, col0: usize) -> Result<Vec<(Tok, usize)>, ModelError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        let col = col0 + i;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let single = match c {
            '+' => Some(Tok::Plus),
            '-' => Some(Tok::Minus),
            '*' => Some(Tok::Star),
            '/' => Some(Tok::Slash),
            '^' => Some(Tok::Caret),
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            ',' => Some(Tok::Comma),
            _ => None,
        };
        if let Some(t) = single {
            out.push((t, col));
            i += 1;
            continue;
        }
        if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                i += 1;
            }
            if i < bytes.len() && bytes[i] == b'.' {
                i += 1;
                while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                    i += 1;
                }
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && (bytes[j] as char).is_ascii_digit() {
                    i = j;
                    while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text = &src[start..i];
            // C float/long suffixes
            if i < bytes.len() && matches!(bytes[i], b'f' | b'F' | b'l' | b'L') {
                i += 1;
            }
            let value: f64 = text.parse().map_err(|_| ModelError::Syntax {
                line,
                col,
                msg: format!("invalid number literal `{text}`"),
            })?;
            out.push((Tok::Num(value), col));
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_')
            {
                i += 1;
            }
            out.push((Tok::Ident(src[start..i].to_string()), col));
            continue;
        }
        return Err(ModelError::Syntax {
            line,
            col,
            msg: format!("unexpected character `{c}`"),
        });
    }
    Ok(out)
}

impl<'a> ExprParser<'a> {
    pub(crate) fn new(
        src: &str,
        line: usize,
        col0: usize,
        resolve: &'a dyn Fn(&str) -> Option<Symbol>,
    ) -> Result<Self, ModelError> {
        Ok(ExprParser {
            toks: lex(src, line, col0)?,
            pos: 0,
            line,
            end_col: col0 + src.len(),
            resolve,
        })
    }

    pub(crate) fn parse_all(mut self) -> Result<Expr, ModelError> {
        let e = self.expr()?;
        if let Some((t, col)) = self.toks.get(self.pos) {
            return Err(self.err_at(*col, format!("unexpected token {t:?}")));
        }
        Ok(e)
    }

    fn err_at(&self, col: usize, msg: String) -> ModelError {
        ModelError::Syntax {
            line: self.line,
            col,
            msg,
        }
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn col(&self) -> usize {
        self.toks.get(self.pos).map(|(_, c)| *c).unwrap_or(self.end_col)
    }

    fn expect(&mut self, want: Tok) -> Result<(), ModelError> {
        match self.peek() {
            Some(t) if *t == want => {
                self.pos += 1;
                Ok(())
            }
            other => Err(self.err_at(self.col(), format!("expected {want:?}, found {other:?}"))),
        }
    }

    fn expr(&mut self) -> Result<Expr, ModelError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Plus) => BinOp::Add,
                Some(Tok::Minus) => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr, ModelError> {
        let mut lhs = self.power()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Star) => BinOp::Mul,
                Some(Tok::Slash) => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.power()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn power(&mut self) -> Result<Expr, ModelError> {
        let base = self.unary()?;
        if let Some(Tok::Caret) = self.peek() {
            self.pos += 1;
            let exp = self.power()?;
            return Ok(Expr::Binary(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn unary(&mut self) -> Result<Expr, ModelError> {
        match self.peek() {
            Some(Tok::Minus) => {
                self.pos += 1;
                Ok(Expr::Neg(Box::new(self.unary()?)))
            }
            Some(Tok::Plus) => {
                self.pos += 1;
                self.unary()
            }
            _ => self.primary(),
        }
    }

    fn primary(&mut self) -> Result<Expr, ModelError> {
        let col = self.col();
        let Some((tok, _)) = self.toks.get(self.pos).cloned() else {
            return Err(self.err_at(col, "unexpected end of expression".into()));
        };
        self.pos += 1;
        match tok {
            Tok::Num(v) => Ok(Expr::Num(v)),
            Tok::LParen => {
                let e = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            Tok::Ident(name) => {
                if let Some(Tok::LParen) = self.peek() {
                    let func = Func::from_name(&name).ok_or_else(|| ModelError::UnknownFunction {
                        name: name.clone(),
                        line: self.line,
                    })?;
                    self.pos += 1;
                    let mut args = Vec::new();
                    if let Some(Tok::RParen) = self.peek() {
                        self.pos += 1;
                    } else {
                        loop {
                            args.push(self.expr()?);
                            match self.peek() {
                                Some(Tok::Comma) => self.pos += 1,
                                _ => {
                                    self.expect(Tok::RParen)?;
                                    break;
                                }
                            }
                        }
                    }
                    if args.len() != func.arity() {
                        return Err(ModelError::Arity {
                            func: func.name(),
                            expected: func.arity(),
                            found: args.len(),
                            line: self.line,
                        });
                    }
                    Ok(Expr::Call(func, args))
                } else {
                    (self.resolve)(&name)
                        .map(Expr::Var)
                        .ok_or(ModelError::UnknownIdentifier {
                            name,
                            line: self.line,
                        })
                }
            }
            other => Err(self.err_at(col, format!("unexpected token {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(src: &str) -> Result<Expr, ModelError> {
        let resolve = |n: &str| match n {
            "x" => Some(Symbol::State(0)),
            "y" => Some(Symbol::State(1)),
            _ => None,
        };
        ExprParser::new(src, 1, 0, &resolve)?.parse_all()
    }

    fn eval(src: &str, x: f64, y: f64) -> f64 {
        let e = parse(src).unwrap();
        super::super::expr::Tape::compile(&e).eval(&[x, y], &[], &[])
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(eval("1 + 2 * 3", 0.0, 0.0), 7.0);
        assert_eq!(eval("8 / 4 / 2", 0.0, 0.0), 1.0);
        assert_eq!(eval("10 - 4 - 3", 0.0, 0.0), 3.0);
        assert_eq!(eval("2 ^ 3 ^ 2", 0.0, 0.0), 512.0);
        // unary minus binds tighter than power
        assert_eq!(eval("-x ^ 2", 3.0, 0.0), 9.0);
        assert_eq!(eval("-(x ^ 2)", 3.0, 0.0), -9.0);
        assert_eq!(eval("2 * -y", 0.0, 4.0), -8.0);
    }

    #[test]
    fn c_literals() {
        assert_eq!(eval("1.5e2", 0.0, 0.0), 150.0);
        assert_eq!(eval(".5", 0.0, 0.0), 0.5);
        assert_eq!(eval("2.", 0.0, 0.0), 2.0);
        assert_eq!(eval("1E-3f", 0.0, 0.0), 1e-3);
    }

    #[test]
    fn calls_check_arity() {
        assert_eq!(eval("pow(x, 2) + fabs(-1)", 3.0, 0.0), 10.0);
        assert!(matches!(parse("atan2(x)"), Err(ModelError::Arity { .. })));
        assert!(matches!(
            parse("floor(x)"),
            Err(ModelError::UnknownFunction { .. })
        ));
    }

    #[test]
    fn reports_errors_with_position() {
        match parse("x + * y") {
            Err(ModelError::Syntax { col, .. }) => assert_eq!(col, 4),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse("x + z"), Err(ModelError::UnknownIdentifier { .. })));
        assert!(matches!(parse("(x + y"), Err(ModelError::Syntax { .. })));
        assert!(matches!(parse("x $ y"), Err(ModelError::Syntax { .. })));
    }
}
