//! Tag sets for extraction and sentiment.
//!
//! Index order is part of the checkpoint and message-passing layout and must
//! not change: `(BA, IA, BP, IP, O)` and `(pos, neg, neu)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, ImnError};

/// Token label for joint aspect/opinion term extraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AeLabel {
    /// Beginning of an aspect term.
    BA,
    /// Inside an aspect term.
    IA,
    /// Beginning of an opinion term.
    BP,
    /// Inside an opinion term.
    IP,
    O,
}

impl AeLabel {
    pub const COUNT: usize = 5;
    pub const ALL: [AeLabel; 5] = [AeLabel::BA, AeLabel::IA, AeLabel::BP, AeLabel::IP, AeLabel::O];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AeLabel::BA => "BA",
            AeLabel::IA => "IA",
            AeLabel::BP => "BP",
            AeLabel::IP => "IP",
            AeLabel::O => "O",
        }
    }

    pub fn is_aspect(self) -> bool {
        matches!(self, AeLabel::BA | AeLabel::IA)
    }

    pub fn is_opinion(self) -> bool {
        matches!(self, AeLabel::BP | AeLabel::IP)
    }
}

impl fmt::Display for AeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AeLabel {
    type Err = ImnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AeLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| invalid!("unknown extraction label {s:?}"))
    }
}

/// Predicted aspect sentiment. Also the document sentiment class set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sentiment {
    Pos,
    Neg,
    Neu,
}

impl Sentiment {
    pub const COUNT: usize = 3;
    pub const ALL: [Sentiment; 3] = [Sentiment::Pos, Sentiment::Neg, Sentiment::Neu];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Sentiment::Pos => "pos",
            Sentiment::Neg => "neg",
            Sentiment::Neu => "neu",
        }
    }

    /// Argmax over a 3-way distribution; ties go to the earlier class in
    /// `(pos, neg, neu)` order.
    pub fn argmax(dist: &[f64]) -> Sentiment {
        let mut best = 0;
        for (i, &p) in dist.iter().enumerate().take(Self::COUNT) {
            if p > dist[best] {
                best = i;
            }
        }
        Sentiment::ALL[best]
    }
}

impl fmt::Display for Sentiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sentiment {
    type Err = ImnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Sentiment::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| invalid!("unknown sentiment label {s:?}"))
    }
}

/// Gold sentiment marker on a token. `Conflict` and `None` are never predicted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GoldSentiment {
    Label(Sentiment),
    Conflict,
    None,
}

impl GoldSentiment {
    pub fn as_str(self) -> &'static str {
        match self {
            GoldSentiment::Label(s) => s.as_str(),
            GoldSentiment::Conflict => "conflict",
            GoldSentiment::None => "-",
        }
    }

    pub fn trainable(self) -> Option<Sentiment> {
        match self {
            GoldSentiment::Label(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for GoldSentiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GoldSentiment {
    type Err = ImnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "-" => Ok(GoldSentiment::None),
            "conflict" => Ok(GoldSentiment::Conflict),
            other => other.parse().map(GoldSentiment::Label),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_order_is_frozen() {
        let idx: Vec<usize> = AeLabel::ALL.iter().map(|l| l.index()).collect();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
        assert_eq!(AeLabel::BP.index(), 2);
        assert_eq!(Sentiment::Neu.index(), 2);
    }

    #[test]
    fn argmax_tie_breaks_toward_pos() {
        assert_eq!(Sentiment::argmax(&[1.0 / 3.0; 3]), Sentiment::Pos);
        assert_eq!(Sentiment::argmax(&[0.2, 0.4, 0.4]), Sentiment::Neg);
    }

    #[test]
    fn parsing() {
        assert_eq!("IP".parse::<AeLabel>().unwrap(), AeLabel::IP);
        assert!("B-ASP".parse::<AeLabel>().is_err());
        assert_eq!("-".parse::<GoldSentiment>().unwrap(), GoldSentiment::None);
        assert_eq!(
            "neg".parse::<GoldSentiment>().unwrap(),
            GoldSentiment::Label(Sentiment::Neg)
        );
        assert!("positive".parse::<GoldSentiment>().is_err());
    }
}
