//! Symbol alphabet, the motion codebook and the 8-symbol flight message
//! layout `[start, direction, angle(3), distance(2), end]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::synthgen::MotionPrimitive;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Symbol {
    Start,
    End,
    One,
    Zero,
    Background,
}

impl Symbol {
    /// Class order used by the recognition network.
    pub const CLASSES: [Symbol; 5] = [Symbol::Start, Symbol::End, Symbol::One, Symbol::Zero, Symbol::Background];

    pub fn class_index(self) -> usize {
        self as usize
    }

    pub fn from_class_index(i: usize) -> Option<Symbol> {
        Self::CLASSES.get(i).copied()
    }

    pub fn as_char(self) -> char {
        match self {
            Symbol::Start => 'S',
            Symbol::End => 'E',
            Symbol::One => '1',
            Symbol::Zero => '0',
            Symbol::Background => 'B',
        }
    }

    pub fn from_char(c: char) -> Option<Symbol> {
        match c {
            'S' | 's' => Some(Symbol::Start),
            'E' | 'e' => Some(Symbol::End),
            '1' => Some(Symbol::One),
            '0' => Some(Symbol::Zero),
            'B' | 'b' => Some(Symbol::Background),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Symbol::Start => "start",
            Symbol::End => "end",
            Symbol::One => "one",
            Symbol::Zero => "zero",
            Symbol::Background => "background",
        }
    }

    fn bit(bit: bool) -> Symbol {
        if bit {
            Symbol::One
        } else {
            Symbol::Zero
        }
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Symbol {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "start" | "s" => Ok(Symbol::Start),
            "end" | "e" => Ok(Symbol::End),
            "one" | "1" => Ok(Symbol::One),
            "zero" | "0" => Ok(Symbol::Zero),
            "background" | "b" => Ok(Symbol::Background),
            other => Err(CodecError::UnknownSymbol(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("sequence has {0} symbols, expected 8")]
    WrongLength(usize),
    #[error("sequence does not begin with start")]
    MissingStart,
    #[error("sequence does not finish with end")]
    MissingEnd,
    #[error("background symbol at payload position {0}")]
    BackgroundInPayload(usize),
    #[error("control symbol {symbol} at payload position {index}")]
    ControlInPayload { index: usize, symbol: Symbol },
    #[error("{field} = {value} out of range 0..={max}")]
    FieldOutOfRange { field: &'static str, value: u8, max: u8 },
    #[error("{0} has no motion primitive")]
    NoPrimitive(Symbol),
    #[error("pause carries no symbol")]
    PauseHasNoSymbol,
    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),
}

pub const MESSAGE_LEN: usize = 8;

/// Flight command payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    /// 0 = forward, 1 = backward.
    pub direction: u8,
    pub angle_steps: u8,
    pub distance_code: u8,
}

impl Message {
    pub fn new(direction: u8, angle_steps: u8, distance_code: u8) -> Result<Self, CodecError> {
        let m = Message {
            direction,
            angle_steps,
            distance_code,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        for (field, value, max) in [
            ("direction", self.direction, 1),
            ("angle_steps", self.angle_steps, 7),
            ("distance_code", self.distance_code, 3),
        ] {
            if value > max {
                return Err(CodecError::FieldOutOfRange { field, value, max });
            }
        }
        Ok(())
    }

    /// All 64 valid messages in lexicographic field order.
    pub fn all() -> impl Iterator<Item = Message> {
        (0..2u8).flat_map(|d| {
            (0..8u8).flat_map(move |a| {
                (0..4u8).map(move |c| Message {
                    direction: d,
                    angle_steps: a,
                    distance_code: c,
                })
            })
        })
    }

    pub fn physical(&self, map: &PhysicalMapping) -> PhysicalCommand {
        PhysicalCommand {
            backward: self.direction == 1,
            heading_deg: self.angle_steps as f64 * map.angle_step_deg,
            distance_m: (self.distance_code as f64 + 1.0) * map.distance_step_m,
        }
    }
}

/// Physical interpretation of the coded fields. Only `01 -> 0.2 m` is fixed
/// by the flight scheme; the angle step and the distance step are settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalMapping {
    pub angle_step_deg: f64,
    pub distance_step_m: f64,
}

impl Default for PhysicalMapping {
    fn default() -> Self {
        PhysicalMapping {
            angle_step_deg: 15.0,
            distance_step_m: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalCommand {
    pub backward: bool,
    pub heading_deg: f64,
    pub distance_m: f64,
}

pub fn encode(msg: &Message) -> Result<Vec<Symbol>, CodecError> {
    msg.validate()?;
    let mut seq = Vec::with_capacity(MESSAGE_LEN);
    seq.push(Symbol::Start);
    seq.push(Symbol::bit(msg.direction == 1));
    for shift in (0..3).rev() {
        seq.push(Symbol::bit(msg.angle_steps >> shift & 1 == 1));
    }
    for shift in (0..2).rev() {
        seq.push(Symbol::bit(msg.distance_code >> shift & 1 == 1));
    }
    seq.push(Symbol::End);
    Ok(seq)
}

/// Inverse of [`encode`]. Any failure means the transmission must be repeated.
pub fn decode_payload(seq: &[Symbol]) -> Result<Message, CodecError> {
    if seq.len() != MESSAGE_LEN {
        return Err(CodecError::WrongLength(seq.len()));
    }
    if seq[0] != Symbol::Start {
        return Err(CodecError::MissingStart);
    }
    if seq[MESSAGE_LEN - 1] != Symbol::End {
        return Err(CodecError::MissingEnd);
    }
    let mut bits = [0u8; 6];
    for (i, (&s, b)) in seq[1..7].iter().zip(bits.iter_mut()).enumerate() {
        *b = match s {
            Symbol::One => 1,
            Symbol::Zero => 0,
            Symbol::Background => return Err(CodecError::BackgroundInPayload(i + 1)),
            other => {
                return Err(CodecError::ControlInPayload {
                    index: i + 1,
                    symbol: other,
                })
            }
        };
    }
    let field = |bits: &[u8]| bits.iter().fold(0u8, |acc, &b| acc << 1 | b);
    Ok(Message {
        direction: bits[0],
        angle_steps: field(&bits[1..4]),
        distance_code: field(&bits[4..6]),
    })
}

pub fn symbol_to_primitive(sym: Symbol) -> Result<MotionPrimitive, CodecError> {
    match sym {
        Symbol::Start => Ok(MotionPrimitive::Vertical),
        Symbol::End => Ok(MotionPrimitive::Horizontal),
        Symbol::One => Ok(MotionPrimitive::LeftUpRight),
        Symbol::Zero => Ok(MotionPrimitive::LeftDownRight),
        Symbol::Background => Err(CodecError::NoPrimitive(sym)),
    }
}

pub fn primitive_to_symbol(prim: MotionPrimitive) -> Result<Symbol, CodecError> {
    match prim {
        MotionPrimitive::Vertical => Ok(Symbol::Start),
        MotionPrimitive::Horizontal => Ok(Symbol::End),
        MotionPrimitive::LeftUpRight => Ok(Symbol::One),
        MotionPrimitive::LeftDownRight => Ok(Symbol::Zero),
        MotionPrimitive::Pause => Err(CodecError::PauseHasNoSymbol),
    }
}

/// Compact rendering such as `S000010E`.
pub fn render(seq: &[Symbol]) -> String {
    seq.iter().map(|s| s.as_char()).collect()
}

pub fn parse_compact(s: &str) -> Result<Vec<Symbol>, CodecError> {
    s.chars()
        .filter(|c| !c.is_whitespace())
        .map(|c| Symbol::from_char(c).ok_or_else(|| CodecError::UnknownSymbol(c.to_string())))
        .collect()
}
