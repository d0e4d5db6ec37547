//! Expression trees for model derivatives and their flattened evaluation tape.

use std::fmt;

/// Maximum evaluation stack depth of a compiled expression.
pub const MAX_STACK: usize = 64;

/// Whitelisted math functions (the `math.h` subset accepted by the model format).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Asin,
    Acos,
    Atan,
    Atan2,
    Sqrt,
    Exp,
    Log,
    Fabs,
    Pow,
    Tanh,
    Sinh,
    Cosh,
}

impl Func {
    pub fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "asin" => Func::Asin,
            "acos" => Func::Acos,
            "atan" => Func::Atan,
            "atan2" => Func::Atan2,
            "sqrt" => Func::Sqrt,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "fabs" => Func::Fabs,
            "pow" => Func::Pow,
            "tanh" => Func::Tanh,
            "sinh" => Func::Sinh,
            "cosh" => Func::Cosh,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Asin => "asin",
            Func::Acos => "acos",
            Func::Atan => "atan",
            Func::Atan2 => "atan2",
            Func::Sqrt => "sqrt",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Fabs => "fabs",
            Func::Pow => "pow",
            Func::Tanh => "tanh",
            Func::Sinh => "sinh",
            Func::Cosh => "cosh",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Atan2 | Func::Pow => 2,
            _ => 1,
        }
    }

    fn apply1(self, x: f64) -> f64 {
        match self {
            Func::Sin => x.sin(),
            Func::Cos => x.cos(),
            Func::Tan => x.tan(),
            Func::Asin => x.asin(),
            Func::Acos => x.acos(),
            Func::Atan => x.atan(),
            Func::Sqrt => x.sqrt(),
            Func::Exp => x.exp(),
            Func::Log => x.ln(),
            Func::Fabs => x.abs(),
            Func::Tanh => x.tanh(),
            Func::Sinh => x.sinh(),
            Func::Cosh => x.cosh(),
            Func::Atan2 | Func::Pow => f64::NAN,
        }
    }

    fn apply2(self, a: f64, b: f64) -> f64 {
        match self {
            Func::Atan2 => a.atan2(b),
            Func::Pow => a.powf(b),
            _ => f64::NAN,
        }
    }
}

/// A resolved variable reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Symbol {
    State(usize),
    Input(usize),
    Param(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Symbol),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

impl Expr {
    /// Stack depth needed to evaluate this tree in postfix order.
    pub fn stack_depth(&self) -> usize {
        match self {
            Expr::Num(_) | Expr::Var(_) => 1,
            Expr::Neg(e) => e.stack_depth(),
            Expr::Binary(_, a, b) => a.stack_depth().max(1 + b.stack_depth()),
            Expr::Call(_, args) => args
                .iter()
                .enumerate()
                .map(|(i, a)| i + a.stack_depth())
                .max()
                .unwrap_or(1),
        }
    }

    fn compile_into(&self, ops: &mut Vec<Op>) {
        match self {
            Expr::Num(v) => ops.push(Op::Const(*v)),
            Expr::Var(Symbol::State(i)) => ops.push(Op::State(*i)),
            Expr::Var(Symbol::Input(i)) => ops.push(Op::Input(*i)),
            Expr::Var(Symbol::Param(i)) => ops.push(Op::Param(*i)),
            Expr::Neg(e) => {
                e.compile_into(ops);
                ops.push(Op::Neg);
            }
            Expr::Binary(op, a, b) => {
                a.compile_into(ops);
                b.compile_into(ops);
                ops.push(Op::Bin(*op));
            }
            Expr::Call(f, args) => {
                for a in args {
                    a.compile_into(ops);
                }
                if f.arity() == 2 {
                    ops.push(Op::Call2(*f));
                } else {
                    ops.push(Op::Call1(*f));
                }
            }
        }
    }

    /// Writes the expression in model-file syntax, fully parenthesized so that
    /// re-parsing reproduces the same tree.
    pub fn write_dsl(
        &self,
        f: &mut impl fmt::Write,
        names: &dyn Fn(Symbol) -> String,
    ) -> fmt::Result {
        match self {
            Expr::Num(v) => {
                if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) {
                    write!(f, "(-{:?})", -v)
                } else {
                    write!(f, "{v:?}")
                }
            }
            Expr::Var(s) => write!(f, "{}", names(*s)),
            Expr::Neg(e) => {
                write!(f, "(-")?;
                e.write_dsl(f, names)?;
                write!(f, ")")
            }
            Expr::Binary(op, a, b) => {
                write!(f, "(")?;
                a.write_dsl(f, names)?;
                write!(f, " {} ", op.symbol())?;
                b.write_dsl(f, names)?;
                write!(f, ")")
            }
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    a.write_dsl(f, names)?;
                }
                write!(f, ")")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Const(f64),
    State(usize),
    Input(usize),
    Param(usize),
    Neg,
    Bin(BinOp),
    Call1(Func),
    Call2(Func),
}

/// Postfix program for one expression; evaluation uses a fixed-size stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    ops: Vec<Op>,
}

impl Tape {
    pub fn compile(expr: &Expr) -> Tape {
        let mut ops = Vec::new();
        expr.compile_into(&mut ops);
        Tape { ops }
    }

    #[inline]
    pub fn eval(&self, z: &[f64], u: &[f64], p: &[f64]) -> f64 {
        let mut stack = [0.0f64; MAX_STACK];
        let mut top = 0usize;
        for op in &self.ops {
            match *op {
                Op::Const(v) => {
                    stack[top] = v;
                    top += 1;
                }
                Op::State(i) => {
                    stack[top] = z[i];
                    top += 1;
                }
                Op::Input(i) => {
                    stack[top] = u[i];
                    top += 1;
                }
                Op::Param(i) => {
                    stack[top] = p[i];
                    top += 1;
                }
                Op::Neg => stack[top - 1] = -stack[top - 1],
                Op::Bin(b) => {
                    let rhs = stack[top - 1];
                    let lhs = stack[top - 2];
                    top -= 1;
                    stack[top - 1] = match b {
                        BinOp::Add => lhs + rhs,
                        BinOp::Sub => lhs - rhs,
                        BinOp::Mul => lhs * rhs,
                        BinOp::Div => lhs / rhs,
                        BinOp::Pow => lhs.powf(rhs),
                    };
                }
                Op::Call1(f) => stack[top - 1] = f.apply1(stack[top - 1]),
                Op::Call2(f) => {
                    let b = stack[top - 1];
                    let a = stack[top - 2];
                    top -= 1;
                    stack[top - 1] = f.apply2(a, b);
                }
            }
        }
        stack[0]
    }
}
