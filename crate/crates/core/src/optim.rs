//! Optimizer runtime.
//!
//! An [`OptimizerSpec`] is four expression trees evaluated once per step for
//! every weight tensor, in order: `x_func`, `y_func`, `z_func`, then
//! `weight_func`. Each auxiliary sees the freshly computed auxiliaries before
//! it; `weight_func` sees all three plus the current weight (`alpha`) but
//! never the gradient. Auxiliaries start at zero.
//!
//! Optimizers that need information outside that form (Adam's step-count
//! bias correction, Nesterov's look-ahead) run natively.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sched::ScheduledSgd;
use crate::tensor::{elementwise, OpCode, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("variable `{0}` is not bound")]
    Unbound(Var),
    #[error("{func} may not read `{var}`")]
    Forbidden { func: &'static str, var: Var },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("parse error at byte {pos}: {message}")]
    Parse { pos: usize, message: String },
    #[error("missing hyperparameter `{0}`")]
    MissingHyperParam(String),
    #[error("hyperparameter `{0}` must be finite")]
    NonFiniteHyperParam(String),
    #[error("unknown optimizer `{0}`")]
    UnknownOptimizer(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Var {
    X,
    Y,
    Z,
    Grad,
    Alpha,
}

impl Var {
    pub fn name(self) -> &'static str {
        match self {
            Var::X => "x",
            Var::Y => "y",
            Var::Z => "z",
            Var::Grad => "grad",
            Var::Alpha => "alpha",
        }
    }

    pub fn from_name(s: &str) -> Option<Var> {
        Some(match s {
            "x" => Var::X,
            "y" => Var::Y,
            "z" => Var::Z,
            "grad" => Var::Grad,
            "alpha" => Var::Alpha,
            _ => return None,
        })
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Apply(OpCode, Vec<Expr>),
}

impl Expr {
    pub fn apply(op: OpCode, args: Vec<Expr>) -> Expr {
        debug_assert_eq!(op.arity(), args.len());
        Expr::Apply(op, args)
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.collect_vars(&mut out);
        out.sort();
        out.dedup();
        out
    }

    fn collect_vars(&self, out: &mut Vec<Var>) {
        match self {
            Expr::Const(_) => {}
            Expr::Var(v) => out.push(*v),
            Expr::Apply(_, args) => args.iter().for_each(|a| a.collect_vars(out)),
        }
    }

    pub fn size(&self) -> usize {
        match self {
            Expr::Apply(_, args) => 1 + args.iter().map(Expr::size).sum::<usize>(),
            _ => 1,
        }
    }

    /// Parse prefix notation such as `subtract(alpha, multiply(0.01, grad))`.
    pub fn parse(text: &str) -> Result<Expr, OptimError> {
        let mut p = ExprParser::new(text);
        let e = p.expr()?;
        p.skip_ws();
        if p.pos != p.src.len() {
            return Err(p.error("trailing input"));
        }
        Ok(e)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Var(v) => f.write_str(v.name()),
            Expr::Apply(op, args) => {
                write!(f, "{op}(")?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

pub(crate) struct ExprParser<'a> {
    pub(crate) src: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> ExprParser<'a> {
    pub(crate) fn new(text: &'a str) -> Self {
        Self {
            src: text.as_bytes(),
            pos: 0,
        }
    }

    pub(crate) fn error(&self, message: &str) -> OptimError {
        OptimError::Parse {
            pos: self.pos,
            message: message.to_string(),
        }
    }

    pub(crate) fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    pub(crate) fn eat(&mut self, c: u8) -> bool {
        self.skip_ws();
        if self.src.get(self.pos) == Some(&c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    pub(crate) fn word(&mut self) -> Option<&'a str> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_') {
            self.pos += 1;
        }
        (self.pos > start).then(|| std::str::from_utf8(&self.src[start..self.pos]).expect("ascii"))
    }

    pub(crate) fn number(&mut self) -> Option<f64> {
        self.skip_ws();
        let start = self.pos;
        let mut end = self.pos;
        while end < self.src.len() {
            let c = self.src[end];
            let sign_ok = (c == b'-' || c == b'+') && (end == start || matches!(self.src[end - 1], b'e' | b'E'));
            if c.is_ascii_digit() || c == b'.' || c == b'e' || c == b'E' || sign_ok {
                end += 1;
            } else {
                break;
            }
        }
        let text = std::str::from_utf8(&self.src[start..end]).ok()?;
        let v = text.parse::<f64>().ok()?;
        self.pos = end;
        Some(v)
    }

    pub(crate) fn expr(&mut self) -> Result<Expr, OptimError> {
        self.skip_ws();
        let Some(&c) = self.src.get(self.pos) else {
            return Err(self.error("unexpected end of input"));
        };
        if c.is_ascii_digit() || c == b'-' || c == b'+' || c == b'.' {
            return self.number().map(Expr::Const).ok_or_else(|| self.error("bad number"));
        }
        let start = self.pos;
        let Some(name) = self.word() else {
            return Err(self.error("expected expression"));
        };
        if self.eat(b'(') {
            let op = OpCode::from_name(name).ok_or_else(|| OptimError::Parse {
                pos: start,
                message: format!("unknown operation `{name}`"),
            })?;
            let mut args = Vec::new();
            loop {
                args.push(self.expr()?);
                if self.eat(b')') {
                    break;
                }
                if !self.eat(b',') {
                    return Err(self.error("expected `,` or `)`"));
                }
            }
            if args.len() != op.arity() {
                return Err(OptimError::Parse {
                    pos: start,
                    message: format!("{op} takes {} argument(s), got {}", op.arity(), args.len()),
                });
            }
            Ok(Expr::Apply(op, args))
        } else {
            Var::from_name(name).map(Expr::Var).ok_or_else(|| OptimError::Parse {
                pos: start,
                message: format!("unknown variable `{name}`"),
            })
        }
    }
}

/// Variable bindings for one evaluation.
#[derive(Default, Clone, Copy)]
pub struct Env<'a> {
    pub x: Option<&'a Tensor>,
    pub y: Option<&'a Tensor>,
    pub z: Option<&'a Tensor>,
    pub grad: Option<&'a Tensor>,
    pub alpha: Option<&'a Tensor>,
}

impl<'a> Env<'a> {
    fn get(&self, v: Var) -> Option<&'a Tensor> {
        match v {
            Var::X => self.x,
            Var::Y => self.y,
            Var::Z => self.z,
            Var::Grad => self.grad,
            Var::Alpha => self.alpha,
        }
    }
}

fn eval_cow<'a>(e: &Expr, env: &Env<'a>) -> Result<Cow<'a, Tensor>, OptimError> {
    match e {
        Expr::Const(c) => Ok(Cow::Owned(Tensor::scalar(*c))),
        Expr::Var(v) => env.get(*v).map(Cow::Borrowed).ok_or(OptimError::Unbound(*v)),
        Expr::Apply(op, args) => {
            let vals = args.iter().map(|a| eval_cow(a, env)).collect::<Result<Vec<_>, _>>()?;
            let refs: Vec<&Tensor> = vals.iter().map(|c| c.as_ref()).collect();
            Ok(Cow::Owned(elementwise(*op, &refs)?))
        }
    }
}

/// Evaluate `e` elementwise; constants act as scalars.
pub fn eval_expr(e: &Expr, env: &Env<'_>) -> Result<Tensor, OptimError> {
    Ok(eval_cow(e, env)?.into_owned())
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSpec {
    pub name: String,
    pub x_func: Expr,
    pub y_func: Expr,
    pub z_func: Expr,
    pub weight_func: Expr,
}

const FUNC_NAMES: [&str; 4] = ["x_func", "y_func", "z_func", "weight_func"];

fn allowed_vars(func: usize) -> &'static [Var] {
    match func {
        0 => &[Var::X, Var::Grad, Var::Alpha],
        1 => &[Var::X, Var::Y, Var::Grad, Var::Alpha],
        2 => &[Var::X, Var::Y, Var::Z, Var::Grad, Var::Alpha],
        _ => &[Var::X, Var::Y, Var::Z, Var::Alpha],
    }
}

impl OptimizerSpec {
    /// Build a spec, rejecting variable reads that break the x → y → z →
    /// weight order or feed the gradient to the weight function.
    pub fn new(name: impl Into<String>, x_func: Expr, y_func: Expr, z_func: Expr, weight_func: Expr) -> Result<Self, OptimError> {
        let spec = Self {
            name: name.into(),
            x_func,
            y_func,
            z_func,
            weight_func,
        };
        for (i, e) in spec.funcs().iter().enumerate() {
            if let Some(v) = e.vars().into_iter().find(|v| !allowed_vars(i).contains(v)) {
                return Err(OptimError::Forbidden { func: FUNC_NAMES[i], var: v });
            }
        }
        Ok(spec)
    }

    pub fn funcs(&self) -> [&Expr; 4] {
        [&self.x_func, &self.y_func, &self.z_func, &self.weight_func]
    }

    /// Parse either the grammar's phenotype form
    /// (`x_func, y_func, z_func, weight_func = e1, e2, e3, e4`) or the
    /// line-oriented form written by [`OptimizerSpec::to_text`].
    pub fn parse(text: &str) -> Result<Self, OptimError> {
        let body = text.trim();
        if let Some(rest) = body.strip_prefix("x_func,") {
            let eq = rest.find('=').ok_or(OptimError::Parse {
                pos: 0,
                message: "missing `=` after function list".into(),
            })?;
            let mut p = ExprParser::new(&rest[eq + 1..]);
            let mut exprs = Vec::with_capacity(4);
            for i in 0..4 {
                if i > 0 && !p.eat(b',') {
                    return Err(p.error("expected `,` between functions"));
                }
                exprs.push(p.expr()?);
            }
            p.skip_ws();
            if p.pos != p.src.len() {
                return Err(p.error("trailing input"));
            }
            let [x, y, z, w]: [Expr; 4] = exprs.try_into().expect("four parsed");
            return OptimizerSpec::new("evolved", x, y, z, w);
        }

        let mut name = "evolved".to_string();
        let mut funcs: BTreeMap<&str, Expr> = BTreeMap::new();
        for (lineno, line) in body.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| OptimError::Parse {
                pos: lineno,
                message: format!("line {}: expected `key = value`", lineno + 1),
            })?;
            let key = key.trim();
            if key == "name" {
                name = value.trim().to_string();
            } else if let Some(k) = FUNC_NAMES.iter().find(|k| **k == key) {
                funcs.insert(k, Expr::parse(value)?);
            } else {
                return Err(OptimError::Parse {
                    pos: lineno,
                    message: format!("line {}: unknown key `{key}`", lineno + 1),
                });
            }
        }
        let mut take = |k: &str| {
            funcs.remove(k).ok_or_else(|| OptimError::Parse {
                pos: 0,
                message: format!("missing `{k}`"),
            })
        };
        let (x, y, z, w) = (take("x_func")?, take("y_func")?, take("z_func")?, take("weight_func")?);
        OptimizerSpec::new(name, x, y, z, w)
    }

    /// Line-oriented serialization, one function per line.
    pub fn to_text(&self) -> String {
        format!(
            "name = {}\nx_func = {}\ny_func = {}\nz_func = {}\nweight_func = {}\n",
            self.name, self.x_func, self.y_func, self.z_func, self.weight_func
        )
    }

    /// Name-independent key identifying the update rule, in the phenotype
    /// form `parse` accepts.
    pub fn canonical(&self) -> String {
        format!(
            "x_func, y_func, z_func, weight_func = {}, {}, {}, {}",
            self.x_func, self.y_func, self.z_func, self.weight_func
        )
    }
}

/// Per-weight-tensor auxiliary state.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub x: Tensor,
    pub y: Tensor,
    pub z: Tensor,
}

impl OptState {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            x: Tensor::zeros(shape),
            y: Tensor::zeros(shape),
            z: Tensor::zeros(shape),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub weights: Tensor,
    pub state: OptState,
    /// False when the new weights contain NaN or infinity.
    pub finite: bool,
}

/// One interpreted update; pure.
pub fn step(spec: &OptimizerSpec, state: &OptState, w: &Tensor, grad: &Tensor) -> Result<Step, OptimError> {
    let shape = w.shape();
    for t in [grad, &state.x, &state.y, &state.z] {
        if t.shape() != shape {
            return Err(TensorError::ShapeMismatch {
                left: shape.to_vec(),
                right: t.shape().to_vec(),
            }
            .into());
        }
    }
    let x = eval_cow(
        &spec.x_func,
        &Env {
            x: Some(&state.x),
            grad: Some(grad),
            alpha: Some(w),
            ..Env::default()
        },
    )?
    .broadcast_to(shape)?;
    let y = eval_cow(
        &spec.y_func,
        &Env {
            x: Some(&x),
            y: Some(&state.y),
            grad: Some(grad),
            alpha: Some(w),
            ..Env::default()
        },
    )?
    .broadcast_to(shape)?;
    let z = eval_cow(
        &spec.z_func,
        &Env {
            x: Some(&x),
            y: Some(&y),
            z: Some(&state.z),
            grad: Some(grad),
            alpha: Some(w),
        },
    )?
    .broadcast_to(shape)?;
    let weights = eval_cow(
        &spec.weight_func,
        &Env {
            x: Some(&x),
            y: Some(&y),
            z: Some(&z),
            grad: None,
            alpha: Some(w),
        },
    )?
    .broadcast_to(shape)?;
    let finite = weights.all_finite();
    Ok(Step {
        weights,
        state: OptState { x, y, z },
        finite,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NesterovParams {
    pub lr: f64,
    pub momentum: f64,
}

/// Anything the trainer can step with.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Interpreted(OptimizerSpec),
    /// Bias-corrected Adam; needs the step counter.
    Adam(AdamParams),
    /// Nesterov momentum in its gradient-at-current-point form.
    Nesterov(NesterovParams),
    /// Plain SGD whose learning rate is set once per epoch by a policy.
    Scheduled(ScheduledSgd),
}

/// Per-step context supplied by the training loop.
#[derive(Clone, Copy, Debug)]
pub struct StepCtx {
    /// 1-based count of updates applied so far, including this one.
    pub t: u64,
    /// Learning rate chosen by the schedule for the current epoch.
    pub lr: f64,
}

impl Optimizer {
    pub fn name(&self) -> String {
        match self {
            Optimizer::Interpreted(s) => s.name.clone(),
            Optimizer::Adam(_) => "adam".into(),
            Optimizer::Nesterov(_) => "nesterov".into(),
            Optimizer::Scheduled(s) => format!("scheduled[{}]", s.policy),
        }
    }

    pub fn new_state(&self, shape: &[usize]) -> OptState {
        OptState::zeros(shape)
    }

    /// Learning rate for `epoch`; `None` for optimizers without a schedule.
    pub fn epoch_lr(&self, epoch: usize, prev_lr: f64) -> Option<f64> {
        match self {
            Optimizer::Scheduled(s) => Some(s.policy.eval(epoch, prev_lr)),
            _ => None,
        }
    }

    pub fn initial_lr(&self) -> f64 {
        match self {
            Optimizer::Scheduled(s) => s.initial_lr,
            _ => f64::NAN,
        }
    }

    /// Update `w` in place. Returns whether the new weights are finite.
    pub fn step_in_place(&self, state: &mut OptState, w: &mut Tensor, grad: &Tensor, ctx: StepCtx) -> Result<bool, OptimError> {
        match self {
            Optimizer::Interpreted(spec) => {
                let out = step(spec, state, w, grad)?;
                *w = out.weights;
                *state = out.state;
                Ok(out.finite)
            }
            Optimizer::Adam(p) => {
                let t = ctx.t as i32;
                let scale = p.lr * (1.0 - p.beta2.powi(t)).sqrt() / (1.0 - p.beta1.powi(t));
                let mut finite = true;
                let (m, v) = (state.x.data_mut(), state.y.data_mut());
                for (((wi, &g), mi), vi) in w.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                    *mi = p.beta1 * *mi + (1.0 - p.beta1) * g;
                    *vi = p.beta2 * *vi + (1.0 - p.beta2) * g * g;
                    *wi -= scale * *mi / (vi.sqrt() + p.epsilon);
                    finite &= wi.is_finite();
                }
                Ok(finite)
            }
            Optimizer::Nesterov(p) => {
                let mut finite = true;
                for ((wi, &g), xi) in w.data_mut().iter_mut().zip(grad.data()).zip(state.x.data_mut()) {
                    *xi = p.momentum * *xi - p.lr * g;
                    *wi += p.momentum * *xi - p.lr * g;
                    finite &= wi.is_finite();
                }
                Ok(finite)
            }
            Optimizer::Scheduled(_) => {
                let mut finite = true;
                for (wi, &g) in w.data_mut().iter_mut().zip(grad.data()) {
                    *wi -= ctx.lr * g;
                    finite &= wi.is_finite();
                }
                Ok(finite)
            }
        }
    }
}

/// Named float constants for the built-in optimizers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HyperParams(pub BTreeMap<String, f64>);

impl HyperParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.0.insert(key.to_string(), value);
        self
    }

    pub fn set(&mut self, key: &str, value: f64) {
        self.0.insert(key.to_string(), value);
    }

    pub fn get(&self, key: &str) -> Result<f64, OptimError> {
        let v = *self.0.get(key).ok_or_else(|| OptimError::MissingHyperParam(key.to_string()))?;
        if !v.is_finite() {
            return Err(OptimError::NonFiniteHyperParam(key.to_string()));
        }
        Ok(v)
    }

    /// Library defaults for a built-in optimizer.
    pub fn defaults(name: &str) -> Result<HyperParams, OptimError> {
        let hp = HyperParams::new();
        Ok(match name {
            "sgd" => hp.with("lr", 0.01),
            "momentum" | "nesterov" => hp.with("lr", 0.01).with("mom", 0.9),
            "rmsprop" => hp.with("lr", 0.001).with("rho", 0.9).with("epsilon", 1e-7),
            "adam" | "adam_core" => hp.with("lr", 0.001).with("beta1", 0.9).with("beta2", 0.999).with("epsilon", 1e-7),
            "sign" => hp.with("lr", 0.0009),
            "ades" => hp.with("c1", 0.08922).with("c2", 0.0891),
            other => return Err(OptimError::UnknownOptimizer(other.to_string())),
        })
    }

    /// Defaults overlaid with `self`.
    pub fn over_defaults(&self, name: &str) -> Result<HyperParams, OptimError> {
        let mut base = HyperParams::defaults(name)?;
        base.0.extend(self.0.iter().map(|(k, v)| (k.clone(), *v)));
        Ok(base)
    }
}

pub const BUILTIN_NAMES: [&str; 8] = ["sgd", "momentum", "nesterov", "rmsprop", "adam", "adam_core", "sign", "ades"];

fn c(v: f64) -> Expr {
    Expr::Const(v)
}

fn v(var: Var) -> Expr {
    Expr::Var(var)
}

fn op(o: OpCode, args: Vec<Expr>) -> Expr {
    Expr::apply(o, args)
}

/// A built-in optimizer with the constants in `hp` (all required keys must
/// be present; see [`HyperParams::defaults`]).
pub fn builtin(name: &str, hp: &HyperParams) -> Result<Optimizer, OptimError> {
    use OpCode::*;
    let spec = |x, y, z, w| OptimizerSpec::new(name, x, y, z, w).map(Optimizer::Interpreted);
    match name {
        // x = lr * g ; w = w - x
        "sgd" => spec(
            op(Multiply, vec![c(hp.get("lr")?), v(Var::Grad)]),
            v(Var::Y),
            v(Var::Z),
            op(Subtract, vec![v(Var::Alpha), v(Var::X)]),
        ),
        // x = mom * x - lr * g ; w = w + x
        "momentum" => spec(
            op(
                Subtract,
                vec![
                    op(Multiply, vec![c(hp.get("mom")?), v(Var::X)]),
                    op(Multiply, vec![c(hp.get("lr")?), v(Var::Grad)]),
                ],
            ),
            v(Var::Y),
            v(Var::Z),
            op(Add, vec![v(Var::Alpha), v(Var::X)]),
        ),
        // x = rho * x + (1 - rho) * g^2 ; y = lr * g ; w = w - y / (sqrt(x) + eps)
        "rmsprop" => {
            let rho = hp.get("rho")?;
            spec(
                op(
                    Add,
                    vec![
                        op(Multiply, vec![c(rho), v(Var::X)]),
                        op(Multiply, vec![c(1.0 - rho), op(Square, vec![v(Var::Grad)])]),
                    ],
                ),
                op(Multiply, vec![c(hp.get("lr")?), v(Var::Grad)]),
                v(Var::Z),
                op(
                    Subtract,
                    vec![
                        v(Var::Alpha),
                        op(DivideNoNan, vec![v(Var::Y), op(Add, vec![op(Sqrt, vec![v(Var::X)]), c(hp.get("epsilon")?)])]),
                    ],
                ),
            )
        }
        // Adam moving averages without bias correction.
        "adam_core" => {
            let (b1, b2) = (hp.get("beta1")?, hp.get("beta2")?);
            spec(
                op(
                    Add,
                    vec![op(Multiply, vec![c(b1), v(Var::X)]), op(Multiply, vec![c(1.0 - b1), v(Var::Grad)])],
                ),
                op(
                    Add,
                    vec![
                        op(Multiply, vec![c(b2), v(Var::Y)]),
                        op(Multiply, vec![c(1.0 - b2), op(Square, vec![v(Var::Grad)])]),
                    ],
                ),
                v(Var::Z),
                op(
                    Subtract,
                    vec![
                        v(Var::Alpha),
                        op(
                            Multiply,
                            vec![
                                c(hp.get("lr")?),
                                op(DivideNoNan, vec![v(Var::X), op(Add, vec![op(Sqrt, vec![v(Var::Y)]), c(hp.get("epsilon")?)])]),
                            ],
                        ),
                    ],
                ),
            )
        }
        // x = g ; w = w - lr * sign(x)
        "sign" => spec(
            v(Var::Grad),
            v(Var::Y),
            v(Var::Z),
            op(Subtract, vec![v(Var::Alpha), op(Multiply, vec![c(hp.get("lr")?), op(Sign, vec![v(Var::X)])])]),
        ),
        // y = (1 - c1) y - (c1 y^2 + c2 y g + c2 g) ; w = w + y
        "ades" => {
            let (c1, c2) = (hp.get("c1")?, hp.get("c2")?);
            spec(
                v(Var::X),
                op(
                    Subtract,
                    vec![
                        op(Multiply, vec![c(1.0 - c1), v(Var::Y)]),
                        op(
                            Add,
                            vec![
                                op(
                                    Add,
                                    vec![
                                        op(Multiply, vec![c(c1), op(Square, vec![v(Var::Y)])]),
                                        op(Multiply, vec![c(c2), op(Multiply, vec![v(Var::Y), v(Var::Grad)])]),
                                    ],
                                ),
                                op(Multiply, vec![c(c2), v(Var::Grad)]),
                            ],
                        ),
                    ],
                ),
                v(Var::Z),
                op(Add, vec![v(Var::Alpha), v(Var::Y)]),
            )
        }
        "adam" => Ok(Optimizer::Adam(AdamParams {
            lr: hp.get("lr")?,
            beta1: hp.get("beta1")?,
            beta2: hp.get("beta2")?,
            epsilon: hp.get("epsilon")?,
        })),
        "nesterov" => Ok(Optimizer::Nesterov(NesterovParams {
            lr: hp.get("lr")?,
            momentum: hp.get("mom")?,
        })),
        other => Err(OptimError::UnknownOptimizer(other.to_string())),
    }
}

/// Built-in with library defaults.
pub fn builtin_default(name: &str) -> Result<Optimizer, OptimError> {
    builtin(name, &HyperParams::defaults(name)?)
}

/// Direct ADES recurrence: `(y', w')`.
pub fn ades_step(y: &Tensor, w: &Tensor, grad: &Tensor, c1: f64, c2: f64) -> Result<(Tensor, Tensor), TensorError> {
    if y.shape() != w.shape() || grad.shape() != w.shape() {
        return Err(TensorError::ShapeMismatch {
            left: w.shape().to_vec(),
            right: grad.shape().to_vec(),
        });
    }
    let new_y: Vec<f64> = y
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&y, &g)| (1.0 - c1) * y - (c1 * y * y + c2 * y * g + c2 * g))
        .collect();
    let new_w: Vec<f64> = w.data().iter().zip(&new_y).map(|(w, y)| w + y).collect();
    Ok((
        Tensor::new(w.shape().to_vec(), new_y)?,
        Tensor::new(w.shape().to_vec(), new_w)?,
    ))
}
