/// Coarse class of a SMILES token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Atom,
    BracketAtom,
    Bond,
    RingClosure,
    BranchOpen,
    BranchClose,
    Dot,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    tokens: Vec<String>,
    kinds: Vec<TokenKind>,
}

impl TokenStream {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn kinds(&self) -> &[TokenKind] {
        &self.kinds
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Concatenation of all tokens; equals the tokenized input.
    pub fn join(&self) -> String {
        self.tokens.concat()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum TokenizeError {
    #[error("empty SMILES string")]
    Empty,
    #[error("unbalanced parenthesis")]
    UnbalancedParenthesis,
    #[error("unterminated bracket atom")]
    UnterminatedBracket,
    #[error("unknown character at byte {0}")]
    UnknownCharacter(usize),
}

const TWO_LETTER: [&str; 2] = ["Cl", "Br"];

/// Greedy longest-match SMILES tokenizer.
///
/// Bracket atoms are single tokens, `Cl`/`Br` win over `C`/`B`, and `%nn`
/// ring closures are one token. Parentheses must balance.
pub fn tokenize_smiles(s: &str) -> Result<TokenStream, TokenizeError> {
    if s.is_empty() {
        return Err(TokenizeError::Empty);
    }
    let bytes = s.as_bytes();
    let mut tokens = Vec::new();
    let mut kinds = Vec::new();
    let mut depth: usize = 0;
    let mut pos = 0;
    while pos < bytes.len() {
        let rest = &s[pos..];
        let (len, kind) = if let Some(two) = TWO_LETTER.iter().find(|t| rest.starts_with(**t)) {
            (two.len(), TokenKind::Atom)
        } else {
            match bytes[pos] {
                b'[' => match rest.find(']') {
                    Some(end) if !rest[1..end].contains('[') => (end + 1, TokenKind::BracketAtom),
                    _ => return Err(TokenizeError::UnterminatedBracket),
                },
                b']' => return Err(TokenizeError::UnknownCharacter(pos)),
                b'B' | b'C' | b'N' | b'O' | b'P' | b'S' | b'F' | b'I' | b'b' | b'c' | b'n' | b'o' | b'p' | b's'
                | b'*' => (1, TokenKind::Atom),
                b'-' | b'=' | b'#' | b'$' | b':' | b'/' | b'\\' => (1, TokenKind::Bond),
                b'0'..=b'9' => (1, TokenKind::RingClosure),
                b'%' => {
                    if bytes.len() >= pos + 3 && bytes[pos + 1].is_ascii_digit() && bytes[pos + 2].is_ascii_digit() {
                        (3, TokenKind::RingClosure)
                    } else {
                        return Err(TokenizeError::UnknownCharacter(pos));
                    }
                }
                b'(' => {
                    depth += 1;
                    (1, TokenKind::BranchOpen)
                }
                b')' => {
                    if depth == 0 {
                        return Err(TokenizeError::UnbalancedParenthesis);
                    }
                    depth -= 1;
                    (1, TokenKind::BranchClose)
                }
                b'.' => (1, TokenKind::Dot),
                _ => return Err(TokenizeError::UnknownCharacter(pos)),
            }
        };
        tokens.push(rest[..len].to_string());
        kinds.push(kind);
        pos += len;
    }
    if depth != 0 {
        return Err(TokenizeError::UnbalancedParenthesis);
    }
    Ok(TokenStream { tokens, kinds })
}
