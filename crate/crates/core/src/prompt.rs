//! Toy caption vocabulary: one coloured shape placed in a quadrant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VOCAB_SIZE: usize = 11;

const WORDS: [&str; VOCAB_SIZE] = [
    "red",
    "green",
    "blue",
    "top-left",
    "top-right",
    "bottom-left",
    "bottom-right",
    "small",
    "large",
    "square",
    "disk",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Position {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Size {
    Small,
    Large,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ShapeClass {
    Square,
    Disk,
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

    pub fn channel(self) -> usize {
        self as usize
    }
}

impl Position {
    pub const ALL: [Position; 4] = [
        Position::TopLeft,
        Position::TopRight,
        Position::BottomLeft,
        Position::BottomRight,
    ];

    /// Horizontal and vertical sign in image coordinates (+x right, +y down).
    pub fn signs(self) -> (f64, f64) {
        match self {
            Position::TopLeft => (-1.0, -1.0),
            Position::TopRight => (1.0, -1.0),
            Position::BottomLeft => (-1.0, 1.0),
            Position::BottomRight => (1.0, 1.0),
        }
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 2] = [ShapeClass::Square, ShapeClass::Disk];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Attributes {
    pub color: Color,
    pub position: Position,
    pub size: Size,
    pub shape: ShapeClass,
}

impl Attributes {
    /// Every attribute combination, in a fixed order.
    pub fn all() -> Vec<Attributes> {
        let mut out = Vec::new();
        for color in Color::ALL {
            for position in Position::ALL {
                for size in Size::ALL {
                    for shape in ShapeClass::ALL {
                        out.push(Attributes {
                            color,
                            position,
                            size,
                            shape,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn tokens(&self) -> Vec<u32> {
        vec![
            self.color as u32,
            3 + self.position as u32,
            7 + self.size as u32,
            9 + self.shape as u32,
        ]
    }

    pub fn text(&self) -> String {
        tokens_to_text(&self.tokens())
    }
}

/// Attributes named by a token bag; attributes that are not mentioned stay
/// `None`. A later token overrides an earlier one of the same group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TargetAttributes {
    pub color: Option<Color>,
    pub position: Option<Position>,
    pub size: Option<Size>,
    pub shape: Option<ShapeClass>,
}

impl TargetAttributes {
    pub fn from_tokens(tokens: &[u32]) -> Self {
        let mut t = TargetAttributes::default();
        for &tok in tokens {
            match tok {
                0..=2 => t.color = Some(Color::ALL[tok as usize]),
                3..=6 => t.position = Some(Position::ALL[tok as usize - 3]),
                7..=8 => t.size = Some(Size::ALL[tok as usize - 7]),
                9..=10 => t.shape = Some(ShapeClass::ALL[tok as usize - 9]),
                _ => {}
            }
        }
        t
    }
}

pub fn word(token: u32) -> Option<&'static str> {
    WORDS.get(token as usize).copied()
}

pub fn tokens_to_text(tokens: &[u32]) -> String {
    tokens
        .iter()
        .map(|&t| word(t).unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn parse_prompt(text: &str) -> Result<Vec<u32>> {
    text.split_whitespace()
        .map(|w| {
            WORDS
                .iter()
                .position(|&v| v.eq_ignore_ascii_case(w))
                .map(|i| i as u32)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown prompt word {w:?}")))
        })
        .collect()
}

/// A packaged evaluation prompt with its category.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptEntry {
    pub id: usize,
    pub category: String,
    pub attributes: Attributes,
}

/// The toy evaluation prompt list, grouped into three categories.
pub fn prompt_set() -> Vec<PromptEntry> {
    Attributes::all()
        .into_iter()
        .enumerate()
        .map(|(id, attributes)| {
            let category = match (attributes.size, attributes.shape) {
                (Size::Small, _) => "small objects",
                (Size::Large, ShapeClass::Square) => "bold blocks",
                (Size::Large, ShapeClass::Disk) => "round forms",
            };
            PromptEntry {
                id,
                category: category.to_string(),
                attributes,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_round_trip() {
        for a in Attributes::all() {
            let t = TargetAttributes::from_tokens(&a.tokens());
            assert_eq!(t.color, Some(a.color));
            assert_eq!(t.position, Some(a.position));
            assert_eq!(t.size, Some(a.size));
            assert_eq!(t.shape, Some(a.shape));
            assert_eq!(parse_prompt(&a.text()).unwrap(), a.tokens());
        }
        assert_eq!(Attributes::all().len(), 48);
    }

    #[test]
    fn parse_rejects_unknown_words() {
        assert!(parse_prompt("red elephant").is_err());
        assert_eq!(parse_prompt("Blue  small").unwrap(), vec![2, 7]);
    }

    #[test]
    fn prompt_set_has_three_categories() {
        let set = prompt_set();
        let mut cats: Vec<_> = set.iter().map(|p| p.category.clone()).collect();
        cats.sort();
        cats.dedup();
        assert_eq!(cats.len(), 3);
    }
}
