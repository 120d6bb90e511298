use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Square,
    Disc,
    Cross,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 3] = [ShapeClass::Square, ShapeClass::Disc, ShapeClass::Cross];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intensity {
    Dim,
    Bright,
}

impl Intensity {
    pub fn opposite(self) -> Self {
        match self {
            Intensity::Dim => Intensity::Bright,
            Intensity::Bright => Intensity::Dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stripes {
    Horizontal,
    Vertical,
}

impl Stripes {
    pub fn opposite(self) -> Self {
        match self {
            Stripes::Horizontal => Stripes::Vertical,
            Stripes::Vertical => Stripes::Horizontal,
        }
    }
}

/// Structured prompt. A *source* prompt names only the shape; a *target*
/// prompt adds at least one attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PromptSpec {
    pub shape: ShapeClass,
    #[serde(default)]
    pub intensity: Option<Intensity>,
    #[serde(default)]
    pub stripes: Option<Stripes>,
}

/// Width of [`PromptSpec::embed`]: shape (3) ⊕ intensity (none/dim/bright) ⊕ stripes (none/h/v).
pub const PROMPT_EMBED_DIM: usize = 9;

impl PromptSpec {
    pub fn source(shape: ShapeClass) -> Self {
        Self {
            shape,
            intensity: None,
            stripes: None,
        }
    }

    pub fn new(shape: ShapeClass, intensity: Option<Intensity>, stripes: Option<Stripes>) -> Self {
        Self {
            shape,
            intensity,
            stripes,
        }
    }

    pub fn is_source(&self) -> bool {
        self.intensity.is_none() && self.stripes.is_none()
    }

    pub fn is_target(&self) -> bool {
        !self.is_source()
    }

    /// One-hot concatenation consumed by the denoiser.
    pub fn embed(&self) -> [f64; PROMPT_EMBED_DIM] {
        let mut e = [0.0; PROMPT_EMBED_DIM];
        e[self.shape.index()] = 1.0;
        e[3 + match self.intensity {
            None => 0,
            Some(Intensity::Dim) => 1,
            Some(Intensity::Bright) => 2,
        }] = 1.0;
        e[6 + match self.stripes {
            None => 0,
            Some(Stripes::Horizontal) => 1,
            Some(Stripes::Vertical) => 2,
        }] = 1.0;
        e
    }
}

impl fmt::Display for PromptSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let shape = match self.shape {
            ShapeClass::Square => "square",
            ShapeClass::Disc => "disc",
            ShapeClass::Cross => "cross",
        };
        if let Some(i) = self.intensity {
            write!(f, "{} ", if i == Intensity::Dim { "dim" } else { "bright" })?;
        }
        write!(f, "{shape}")?;
        if let Some(s) = self.stripes {
            let o = if s == Stripes::Horizontal {
                "horizontal"
            } else {
                "vertical"
            };
            write!(f, " with {o} stripes")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embed_is_three_one_hots() {
        let p = PromptSpec::new(ShapeClass::Disc, Some(Intensity::Bright), None);
        let e = p.embed();
        assert_eq!(e.iter().sum::<f64>(), 3.0);
        assert_eq!(e[1], 1.0);
        assert_eq!(e[5], 1.0);
        assert_eq!(e[6], 1.0);
        assert_eq!(p.to_string(), "bright disc");
    }

    #[test]
    fn source_and_target() {
        assert!(PromptSpec::source(ShapeClass::Cross).is_source());
        assert!(PromptSpec::new(ShapeClass::Cross, None, Some(Stripes::Vertical)).is_target());
    }
}
