//! Unit annotations for configuration values.
//!
//! Config files may state a value either as a bare number (taken to be SI)
//! or as `{ value = .., unit = ".." }`. The unit expression is parsed into a
//! scale factor and a dimension over the SI base units, and the dimension is
//! checked against what the target field expects before the value is scaled.

use std::fmt;

/// Twice the exponents over (m, kg, s, A, K, mol), so half-integer powers
/// such as the m^2.5 of a reaction rate constant are representable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dimension([i8; 6]);

impl Dimension {
    pub const NONE: Dimension = Dimension([0; 6]);
    pub const LENGTH: Dimension = Dimension([2, 0, 0, 0, 0, 0]);
    pub const AREA: Dimension = Dimension([4, 0, 0, 0, 0, 0]);
    pub const TIME: Dimension = Dimension([0, 0, 2, 0, 0, 0]);
    pub const CURRENT: Dimension = Dimension([0, 0, 0, 2, 0, 0]);
    pub const TEMPERATURE: Dimension = Dimension([0, 0, 0, 0, 2, 0]);
    pub const VOLTAGE: Dimension = Dimension([4, 2, -6, -2, 0, 0]);
    pub const VOLTAGE_SQUARED: Dimension = Dimension([8, 4, -12, -4, 0, 0]);
    pub const CONCENTRATION: Dimension = Dimension([-6, 0, 0, 0, 0, 2]);
    pub const DIFFUSIVITY: Dimension = Dimension([4, 0, -2, 0, 0, 0]);
    pub const CONDUCTIVITY: Dimension = Dimension([-6, -2, 6, 4, 0, 0]);
    pub const CHARGE_PER_MOLE: Dimension = Dimension([0, 0, 2, 2, 0, -2]);
    pub const ENERGY_PER_MOLE_KELVIN: Dimension = Dimension([4, 2, -4, 0, -2, -2]);
    /// m^2.5 mol^-0.5 s^-1
    pub const RATE_CONSTANT: Dimension = Dimension([5, 0, -2, 0, 0, -1]);

    fn mul(self, other: Dimension, sign: i8) -> Dimension {
        let mut out = self.0;
        for (o, e) in out.iter_mut().zip(other.0) {
            *o += sign * e;
        }
        Dimension(out)
    }

    /// `half_p` is twice the power.
    fn pow(self, half_p: i8) -> Dimension {
        Dimension(self.0.map(|e| e * half_p / 2))
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const NAMES: [&str; 6] = ["m", "kg", "s", "A", "K", "mol"];
        let parts: Vec<String> = self
            .0
            .iter()
            .zip(NAMES)
            .filter(|(e, _)| **e != 0)
            .map(|(e, n)| match *e {
                2 => n.to_string(),
                e if e % 2 == 0 => format!("{n}^{}", e / 2),
                e => format!("{n}^{}", f64::from(e) / 2.0),
            })
            .collect();
        if parts.is_empty() {
            f.write_str("1")
        } else {
            f.write_str(&parts.join(" "))
        }
    }
}

/// A parsed unit: multiply a value by `factor` to get SI.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Unit {
    pub factor: f64,
    pub dimension: Dimension,
}

impl Unit {
    const fn new(factor: f64, dimension: [i8; 6]) -> Unit {
        Unit {
            factor,
            dimension: Dimension(dimension),
        }
    }

    fn combine(self, other: Unit, divide: bool) -> Unit {
        if divide {
            Unit {
                factor: self.factor / other.factor,
                dimension: self.dimension.mul(other.dimension, -1),
            }
        } else {
            Unit {
                factor: self.factor * other.factor,
                dimension: self.dimension.mul(other.dimension, 1),
            }
        }
    }

    fn pow(self, half_p: i8) -> Unit {
        Unit {
            factor: self.factor.powf(f64::from(half_p) / 2.0),
            dimension: self.dimension.pow(half_p),
        }
    }
}

fn atom(name: &str) -> Option<Unit> {
    let u = match name {
        "1" | "-" => Unit::new(1.0, [0; 6]),
        "m" => Unit::new(1.0, [2, 0, 0, 0, 0, 0]),
        "cm" => Unit::new(1e-2, [2, 0, 0, 0, 0, 0]),
        "mm" => Unit::new(1e-3, [2, 0, 0, 0, 0, 0]),
        "um" | "µm" | "μm" => Unit::new(1e-6, [2, 0, 0, 0, 0, 0]),
        "nm" => Unit::new(1e-9, [2, 0, 0, 0, 0, 0]),
        "kg" => Unit::new(1.0, [0, 2, 0, 0, 0, 0]),
        "g" => Unit::new(1e-3, [0, 2, 0, 0, 0, 0]),
        "s" => Unit::new(1.0, [0, 0, 2, 0, 0, 0]),
        "min" => Unit::new(60.0, [0, 0, 2, 0, 0, 0]),
        "h" => Unit::new(3600.0, [0, 0, 2, 0, 0, 0]),
        "A" => Unit::new(1.0, [0, 0, 0, 2, 0, 0]),
        "mA" => Unit::new(1e-3, [0, 0, 0, 2, 0, 0]),
        "K" => Unit::new(1.0, [0, 0, 0, 0, 2, 0]),
        "mol" => Unit::new(1.0, [0, 0, 0, 0, 0, 2]),
        "mmol" => Unit::new(1e-3, [0, 0, 0, 0, 0, 2]),
        "pmol" => Unit::new(1e-12, [0, 0, 0, 0, 0, 2]),
        "C" => Unit::new(1.0, [0, 0, 2, 2, 0, 0]),
        "J" => Unit::new(1.0, [4, 2, -4, 0, 0, 0]),
        "V" => Unit::new(1.0, [4, 2, -6, -2, 0, 0]),
        "mV" => Unit::new(1e-3, [4, 2, -6, -2, 0, 0]),
        "S" => Unit::new(1.0, [-4, -2, 6, 4, 0, 0]),
        "Ohm" => Unit::new(1.0, [4, 2, -6, -4, 0, 0]),
        _ => return None,
    };
    Some(u)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitParseError(pub String);

impl fmt::Display for UnitParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Parses expressions such as `C/pmol`, `J/(pmol*K)`, `um^2`, `pmol/um^3`.
pub fn parse_unit(expr: &str) -> Result<Unit, UnitParseError> {
    let chars: Vec<char> = expr.chars().filter(|c| !c.is_whitespace()).collect();
    let mut parser = Parser { chars, pos: 0 };
    let unit = parser.product()?;
    if parser.pos != parser.chars.len() {
        return Err(UnitParseError(format!(
            "unexpected '{}' in unit '{expr}'",
            parser.chars[parser.pos]
        )));
    }
    Ok(unit)
}

struct Parser {
    chars: Vec<char>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn product(&mut self) -> Result<Unit, UnitParseError> {
        let mut acc = self.factor()?;
        while let Some(c) = self.peek() {
            match c {
                '*' | '.' | '·' => {
                    self.pos += 1;
                    acc = acc.combine(self.factor()?, false);
                }
                '/' => {
                    self.pos += 1;
                    acc = acc.combine(self.factor()?, true);
                }
                _ => break,
            }
        }
        Ok(acc)
    }

    fn factor(&mut self) -> Result<Unit, UnitParseError> {
        let base = if self.peek() == Some('(') {
            self.pos += 1;
            let inner = self.product()?;
            if self.peek() != Some(')') {
                return Err(UnitParseError("unbalanced parenthesis".into()));
            }
            self.pos += 1;
            inner
        } else {
            let start = self.pos;
            while let Some(c) = self.peek() {
                if c.is_alphabetic() || c == '1' && self.pos == start || c == '-' && self.pos == start
                {
                    self.pos += 1;
                } else {
                    break;
                }
            }
            let name: String = self.chars[start..self.pos].iter().collect();
            atom(&name).ok_or_else(|| UnitParseError(format!("unknown unit '{name}'")))?
        };
        if self.peek() == Some('^') {
            self.pos += 1;
            let start = self.pos;
            if self.peek() == Some('-') {
                self.pos += 1;
            }
            while self.peek().is_some_and(|c| c.is_ascii_digit() || c == '.') {
                self.pos += 1;
            }
            let text: String = self.chars[start..self.pos].iter().collect();
            let p: f64 = text
                .parse()
                .map_err(|_| UnitParseError(format!("bad exponent '{text}'")))?;
            let half = 2.0 * p;
            if half.fract() != 0.0 || half.abs() > 40.0 {
                return Err(UnitParseError(format!(
                    "exponent '{text}' must be a multiple of 0.5"
                )));
            }
            return Ok(base.pow(half as i8));
        }
        Ok(base)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn companion_units_convert_to_si() {
        let f = parse_unit("C/pmol").unwrap();
        assert_eq!(f.dimension, Dimension::CHARGE_PER_MOLE);
        assert!((9.6487e-8 * f.factor - 96487.0).abs() < 1e-6);

        let r = parse_unit("J/(pmol*K)").unwrap();
        assert_eq!(r.dimension, Dimension::ENERGY_PER_MOLE_KELVIN);
        assert!((8.314e-12 * r.factor - 8.314).abs() < 1e-12);

        let a = parse_unit("um^2").unwrap();
        assert_eq!(a.dimension, Dimension::AREA);
        assert!((2.05e12 * a.factor - 2.05).abs() < 1e-12);

        let c = parse_unit("pmol/um^3").unwrap();
        assert_eq!(c.dimension, Dimension::CONCENTRATION);
        assert!((5.1554e-2 * c.factor - 51554.0).abs() < 1e-6);
    }

    #[test]
    fn derived_units_agree() {
        assert_eq!(parse_unit("S/m").unwrap().dimension, Dimension::CONDUCTIVITY);
        assert_eq!(parse_unit("um^2/s").unwrap().dimension, Dimension::DIFFUSIVITY);
        assert_eq!(parse_unit("V^2").unwrap().dimension, Dimension::VOLTAGE_SQUARED);
        assert_eq!(parse_unit("1").unwrap().dimension, Dimension::NONE);
        assert_eq!(parse_unit("mV").unwrap().factor, 1e-3);
        let k = parse_unit("um^2.5/(pmol^0.5*s)").unwrap();
        assert_eq!(k.dimension, Dimension::RATE_CONSTANT);
        assert!((0.0233 * k.factor - 2.33e-11).abs() < 1e-20);
        assert_eq!(
            parse_unit("m^2.5*mol^-0.5*s^-1").unwrap().dimension,
            Dimension::RATE_CONSTANT
        );
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse_unit("furlong").is_err());
        assert!(parse_unit("m^x").is_err());
        assert!(parse_unit("(m").is_err());
    }
}
