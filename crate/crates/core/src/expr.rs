//! Closed-form coefficient expressions in the variables `x`, `y`, `t`.

use std::fmt;

use fasteval::{Compiler, Evaler};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// A compiled arithmetic expression such as `"0.2 + 0.05*x*y"`.
pub struct Expression {
    source: String,
    slab: fasteval::Slab,
    instr: fasteval::Instruction,
}

impl Expression {
    pub fn parse(source: &str) -> Result<Self> {
        let err = |e: fasteval::Error| Error::Expression { expr: source.to_owned(), reason: format!("{e:?}") };
        let parser = fasteval::Parser::new();
        let mut slab = fasteval::Slab::new();
        let instr = parser
            .parse(source, &mut slab.ps)
            .map_err(err)?
            .from(&slab.ps)
            .compile(&slab.ps, &mut slab.cs);
        let expr = Expression { source: source.to_owned(), slab, instr };
        // reject unknown variables up front
        expr.try_eval(0.5, 0.5, 0.5).map_err(err)?;
        Ok(expr)
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    fn try_eval(&self, x: f64, y: f64, t: f64) -> std::result::Result<f64, fasteval::Error> {
        let mut ns = |name: &str, _args: Vec<f64>| match name {
            "x" => Some(x),
            "y" => Some(y),
            "t" => Some(t),
            _ => None,
        };
        self.instr.eval(&self.slab, &mut ns)
    }

    pub fn eval(&self, x: f64, y: f64, t: f64) -> f64 {
        self.try_eval(x, y, t).unwrap_or(f64::NAN)
    }
}

impl Clone for Expression {
    fn clone(&self) -> Self {
        Expression::parse(&self.source).expect("expression compiled once already")
    }
}

impl fmt::Debug for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expression({:?})", self.source)
    }
}

impl PartialEq for Expression {
    fn eq(&self, other: &Self) -> bool {
        self.source == other.source
    }
}

/// A coefficient given either as a number or as an expression of `x, y, t`.
#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Coefficient {
    Const(f64),
    Expr(Expression),
}

impl Coefficient {
    #[inline]
    pub fn eval(&self, x: f64, y: f64, t: f64) -> f64 {
        match self {
            Coefficient::Const(c) => *c,
            Coefficient::Expr(e) => e.eval(x, y, t),
        }
    }

    pub fn as_const(&self) -> Option<f64> {
        match self {
            Coefficient::Const(c) => Some(*c),
            Coefficient::Expr(_) => None,
        }
    }
}

impl From<f64> for Coefficient {
    fn from(c: f64) -> Self {
        Coefficient::Const(c)
    }
}

impl Serialize for Coefficient {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Coefficient::Const(c) => s.serialize_f64(*c),
            Coefficient::Expr(e) => s.serialize_str(e.source()),
        }
    }
}

impl<'de> Deserialize<'de> for Coefficient {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(c) => Ok(Coefficient::Const(c)),
            Raw::Text(s) => match s.trim().parse::<f64>() {
                Ok(c) => Ok(Coefficient::Const(c)),
                Err(_) => Expression::parse(&s).map(Coefficient::Expr).map_err(serde::de::Error::custom),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evaluates_variables() {
        let e = Expression::parse("1 + x*y - t^2").unwrap();
        assert_eq!(e.eval(2.0, 3.0, 1.0), 6.0);
        let c: Coefficient = serde_json::from_str("\"0.2*(1+x)\"").unwrap();
        assert!((c.eval(0.5, 0.0, 0.0) - 0.3).abs() < 1e-15);
        let c: Coefficient = serde_json::from_str("0.25").unwrap();
        assert_eq!(c.as_const(), Some(0.25));
    }

    #[test]
    fn rejects_unknown_names() {
        assert!(Expression::parse("x + z").is_err());
        assert!(Expression::parse("x +").is_err());
    }
}
