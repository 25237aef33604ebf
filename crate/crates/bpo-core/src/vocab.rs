//! The fixed 22-token vocabulary shared by tasks, policy, and harness.
//!
//! Layout (token ids are stable and part of the checkpoint/corpus contract):
//!
//! | ids    | symbols                          | role                      |
//! |--------|----------------------------------|---------------------------|
//! | 0–9    | `0` … `9`                        | digits                    |
//! | 10, 11 | `+`, `*`                         | operators                 |
//! | 12–15  | `<r0>` … `<r3>`                  | reserved content slots    |
//! | 16–21  | `<bos>` `<eos>` `<sep>` `<pad>` `<think>` `</think>` | specials |
//!
//! That is 16 content/structure slots plus 6 specials. The four reserved
//! slots carry no semantics today; they exist so the vocabulary (and hence
//! every parameter shape) stays fixed if the task family grows.

use alloc::vec::Vec;
use core::fmt;

/// Number of tokens in the vocabulary.
pub const VOCAB_SIZE: usize = 22;

/// A single token id. Valid ids are `0..VOCAB_SIZE`.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct Token(u8);

impl Token {
    /// The id as a `usize` index into logits/embedding tables.
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// The raw id.
    #[inline]
    pub fn id(self) -> u8 {
        self.0
    }

    /// Crate-internal: rebuilds a token from a logit index. Policy logit
    /// vectors are indexed by token id, so the mapping is the identity.
    #[inline]
    pub(crate) fn from_index(i: usize) -> Token {
        debug_assert!(i <= u8::MAX as usize, "token index {i} out of range");
        Token(i as u8)
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", SYMBOLS[self.index()])
    }
}

const SYMBOLS: [&str; VOCAB_SIZE] = [
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "+", "*", "<r0>", "<r1>", "<r2>", "<r3>",
    "<bos>", "<eos>", "<sep>", "<pad>", "<think>", "</think>",
];

const PLUS_ID: u8 = 10;
const TIMES_ID: u8 = 11;
const BOS_ID: u8 = 16;
const EOS_ID: u8 = 17;
const SEP_ID: u8 = 18;
const PAD_ID: u8 = 19;
const THINK_OPEN_ID: u8 = 20;
const THINK_CLOSE_ID: u8 = 21;

/// The vocabulary: symbol table plus typed accessors for the special ids.
///
/// The table is fixed, so `Vocab` is a zero-sized handle; it exists to give
/// call sites one named source of token identities instead of bare integers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Vocab;

impl Vocab {
    /// Builds the vocabulary.
    pub fn new() -> Self {
        Vocab
    }

    /// Number of tokens.
    #[inline]
    pub fn size(&self) -> usize {
        VOCAB_SIZE
    }

    /// Token for a decimal digit `d` (`d <= 9`).
    ///
    /// # Panics
    /// Panics if `d > 9`; digit values are produced by the task generator
    /// and evaluator, which work modulo 10 by construction.
    #[inline]
    pub fn digit(&self, d: u8) -> Token {
        assert!(d <= 9, "digit out of range: {d}");
        Token(d)
    }

    /// The addition operator `+`.
    #[inline]
    pub fn plus(&self) -> Token {
        Token(PLUS_ID)
    }

    /// The multiplication operator `*`.
    #[inline]
    pub fn times(&self) -> Token {
        Token(TIMES_ID)
    }

    /// Beginning-of-sequence marker.
    #[inline]
    pub fn bos(&self) -> Token {
        Token(BOS_ID)
    }

    /// End-of-sequence marker; generation stops when the policy emits it.
    #[inline]
    pub fn eos(&self) -> Token {
        Token(EOS_ID)
    }

    /// Separator between the query and the response region.
    #[inline]
    pub fn sep(&self) -> Token {
        Token(SEP_ID)
    }

    /// Padding used to left-fill context windows.
    #[inline]
    pub fn pad(&self) -> Token {
        Token(PAD_ID)
    }

    /// Opens the (possibly empty) reasoning span.
    #[inline]
    pub fn think_open(&self) -> Token {
        Token(THINK_OPEN_ID)
    }

    /// Closes the reasoning span.
    #[inline]
    pub fn think_close(&self) -> Token {
        Token(THINK_CLOSE_ID)
    }

    /// Token for an arbitrary id, if in range.
    #[inline]
    pub fn token(&self, id: usize) -> Option<Token> {
        if id < VOCAB_SIZE {
            Some(Token(id as u8))
        } else {
            None
        }
    }

    /// All tokens in id order.
    pub fn tokens(&self) -> impl Iterator<Item = Token> {
        (0..VOCAB_SIZE as u8).map(Token)
    }

    /// The digit value of `tok`, if it is a digit token.
    #[inline]
    pub fn digit_value(&self, tok: Token) -> Option<u8> {
        if tok.0 <= 9 {
            Some(tok.0)
        } else {
            None
        }
    }

    /// Whether `tok` is one of the six special tokens.
    #[inline]
    pub fn is_special(&self, tok: Token) -> bool {
        tok.0 >= BOS_ID
    }

    /// Whether `tok` is a digit or operator (the task-content alphabet).
    #[inline]
    pub fn is_content(&self, tok: Token) -> bool {
        tok.0 <= TIMES_ID
    }

    /// The printable symbol for `tok`.
    #[inline]
    pub fn symbol(&self, tok: Token) -> &'static str {
        SYMBOLS[tok.index()]
    }

    /// Parses a single symbol back into a token.
    pub fn parse_symbol(&self, s: &str) -> Option<Token> {
        SYMBOLS
            .iter()
            .position(|&sym| sym == s)
            .map(|i| Token(i as u8))
    }

    /// Renders a token sequence as space-free text for digits/operators and
    /// angle-bracket names for the rest (`"3+4<sep>"` style). Inverse of
    /// nothing in particular; intended for logs and corpus files.
    pub fn render(&self, tokens: &[Token]) -> alloc::string::String {
        let mut out = alloc::string::String::new();
        for &t in tokens {
            out.push_str(self.symbol(t));
        }
        out
    }
}

/// A set of *banned* token ids, packed into a 32-bit mask.
///
/// The empty mask bans nothing. Masks compose with bitwise-or via
/// [`TokenMask::ban`]. Sampling and scoring both interpret a banned token as
/// having probability exactly zero (its logit is removed before the
/// normalizer is computed), which keeps the two code paths consistent.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub struct TokenMask(u32);

impl TokenMask {
    /// The mask that bans nothing.
    pub const NONE: TokenMask = TokenMask(0);

    /// A mask banning exactly the given tokens.
    pub fn banning(tokens: &[Token]) -> Self {
        let mut m = TokenMask::NONE;
        for &t in tokens {
            m.ban(t);
        }
        m
    }

    /// Bans `tok`.
    #[inline]
    pub fn ban(&mut self, tok: Token) {
        self.0 |= 1u32 << tok.index();
    }

    /// Whether `tok` is banned.
    #[inline]
    pub fn is_banned(self, tok: Token) -> bool {
        self.is_banned_index(tok.index())
    }

    /// Whether the token with raw id `index` is banned. Indices beyond the
    /// mask width are never banned.
    #[inline]
    pub fn is_banned_index(self, index: usize) -> bool {
        index < 32 && self.0 & (1u32 << index) != 0
    }

    /// Whether the mask bans nothing.
    #[inline]
    pub fn bans_nothing(self) -> bool {
        self.0 == 0
    }

    /// Number of allowed tokens under this mask.
    pub fn allowed_count(self) -> usize {
        VOCAB_SIZE - (self.0 & ((1u32 << VOCAB_SIZE) - 1)).count_ones() as usize
    }

    /// Tokens allowed by the mask, in id order.
    pub fn allowed_tokens(self) -> Vec<Token> {
        (0..VOCAB_SIZE as u8)
            .map(Token)
            .filter(|&t| !self.is_banned(t))
            .collect()
    }
}
