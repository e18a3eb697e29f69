//! Token identifiers and the shared vocabulary.
//!
//! Ids 0, 1, 2 are reserved for BOS, EOS and PAD. Word tokens follow, then
//! an optional visual sub-vocabulary (patch-bin tokens or discrete image
//! feature tokens) at the tail. A newline pseudo-token `<nl>` lets decoded
//! streams carry line structure through detokenization.

use std::collections::HashMap;

use thiserror::Error;

/// Index into a [`Vocabulary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

pub const BOS: TokenId = TokenId(0);
pub const EOS: TokenId = TokenId(1);
pub const PAD: TokenId = TokenId(2);

pub const BOS_SURFACE: &str = "<bos>";
pub const EOS_SURFACE: &str = "<eos>";
pub const PAD_SURFACE: &str = "<pad>";
/// Surface form of the line-break pseudo-token.
pub const NEWLINE_SURFACE: &str = "<nl>";

/// A sequence of token ids, e.g. a prompt or a decoded report body.
pub type TokenSequence = Vec<TokenId>;

#[derive(Debug, Error, PartialEq)]
pub enum VocabError {
    #[error("duplicate surface form {0:?}")]
    Duplicate(String),
    #[error("token id {0} out of bounds for vocabulary of size {1}")]
    OutOfBounds(u32, usize),
    #[error("unknown surface form {0:?}")]
    Unknown(String),
}

/// Ordered list of distinct surface forms with reserved BOS/EOS/PAD ids.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    visual_start: Option<u32>,
}

impl Vocabulary {
    /// Builds a vocabulary of the reserved tokens plus the given words.
    /// Word order is preserved; duplicates are rejected.
    pub fn new<I, S>(words: I) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
            visual_start: None,
        };
        for reserved in [BOS_SURFACE, EOS_SURFACE, PAD_SURFACE] {
            vocab.push(reserved.to_string())?;
        }
        for word in words {
            vocab.push(word.into())?;
        }
        Ok(vocab)
    }

    /// Rebuilds a vocabulary from a serialized surface list. The first three
    /// entries must be the reserved tokens; the visual sub-vocabulary starts
    /// at the first `<vis:...>` or `<img:...>` surface, if any.
    pub fn from_surfaces<I, S>(surfaces: I) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
            visual_start: None,
        };
        for surface in surfaces {
            let surface = surface.into();
            let id = vocab.tokens.len();
            match id {
                0 if surface != BOS_SURFACE => return Err(VocabError::Unknown(surface)),
                1 if surface != EOS_SURFACE => return Err(VocabError::Unknown(surface)),
                2 if surface != PAD_SURFACE => return Err(VocabError::Unknown(surface)),
                _ => {}
            }
            if vocab.visual_start.is_none()
                && (surface.starts_with("<vis:") || surface.starts_with("<img:"))
            {
                vocab.visual_start = Some(id as u32);
            }
            vocab.push(surface)?;
        }
        if vocab.tokens.len() < 3 {
            return Err(VocabError::OutOfBounds(2, vocab.tokens.len()));
        }
        Ok(vocab)
    }

    fn push(&mut self, surface: String) -> Result<TokenId, VocabError> {
        if self.index.contains_key(&surface) {
            return Err(VocabError::Duplicate(surface));
        }
        let id = TokenId(self.tokens.len() as u32);
        self.index.insert(surface.clone(), id);
        self.tokens.push(surface);
        Ok(id)
    }

    /// Appends `levels` patch-bin tokens `<vis:0>`..`<vis:levels-1>` and
    /// marks the start of the visual sub-vocabulary.
    pub fn with_visual_bins(mut self, levels: u32) -> Result<Self, VocabError> {
        let start = self.tokens.len() as u32;
        for bin in 0..levels {
            self.push(format!("<vis:{bin}>"))?;
        }
        self.visual_start.get_or_insert(start);
        Ok(self)
    }

    /// Appends one `<img:FEATURE>` token per feature string. The feature
    /// tokens live in the visual sub-vocabulary; models decode them back to
    /// the feature string.
    pub fn with_feature_tokens<I, S>(mut self, features: I) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let start = self.tokens.len() as u32;
        for feature in features {
            self.push(format!("<img:{}>", feature.as_ref()))?;
        }
        self.visual_start.get_or_insert(start);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// First id of the visual sub-vocabulary, if one was appended.
    pub fn visual_start(&self) -> Option<TokenId> {
        self.visual_start.map(TokenId)
    }

    pub fn surface(&self, id: TokenId) -> Result<&str, VocabError> {
        self.tokens
            .get(id.index())
            .map(String::as_str)
            .ok_or(VocabError::OutOfBounds(id.0, self.tokens.len()))
    }

    pub fn id_of(&self, surface: &str) -> Option<TokenId> {
        self.index.get(surface).copied()
    }

    pub fn require(&self, surface: &str) -> Result<TokenId, VocabError> {
        self.id_of(surface)
            .ok_or_else(|| VocabError::Unknown(surface.to_string()))
    }

    /// Id of the `<vis:bin>` token.
    pub fn visual_bin(&self, bin: u32) -> Result<TokenId, VocabError> {
        self.require(&format!("<vis:{bin}>"))
    }

    /// Id of the `<img:feature>` token.
    pub fn feature_token(&self, feature: &str) -> Result<TokenId, VocabError> {
        self.require(&format!("<img:{feature}>"))
    }

    /// Feature string carried by a `<img:...>` token, if it is one.
    pub fn feature_of(&self, id: TokenId) -> Option<&str> {
        let surface = self.tokens.get(id.index())?;
        surface
            .strip_prefix("<img:")
            .and_then(|rest| rest.strip_suffix('>'))
    }

    pub fn surfaces(&self) -> &[String] {
        &self.tokens
    }

    /// Splits text on whitespace and maps each word to its id.
    pub fn tokenize(&self, text: &str) -> Result<TokenSequence, VocabError> {
        text.split_whitespace().map(|w| self.require(w)).collect()
    }

    /// Renders a decoded sequence back to text. BOS and PAD are skipped,
    /// EOS terminates, `<nl>` becomes a line break, and everything else is
    /// joined with single spaces within a line.
    pub fn detokenize(&self, seq: &[TokenId]) -> Result<String, VocabError> {
        let mut out = String::new();
        let mut line_has_word = false;
        for &id in seq {
            if id == EOS {
                break;
            }
            if id == BOS || id == PAD {
                continue;
            }
            let surface = self.surface(id)?;
            if surface == NEWLINE_SURFACE {
                out.push('\n');
                line_has_word = false;
                continue;
            }
            if line_has_word {
                out.push(' ');
            }
            out.push_str(surface);
            line_has_word = true;
        }
        Ok(out)
    }
}
