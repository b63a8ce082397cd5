//! Word-level tokenizer, causal text transformer and the class prompts.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::HostStack;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::layers::{block_forward, BlockParams};
use crate::nn::registry::{BoundParams, Init, ParamDesc, ParamLayout, INIT_STD};
use crate::tensor::Real;

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<sos>", "<eos>", "<unk>"];

/// Lowercases and splits on whitespace; every punctuation character becomes
/// a token of its own.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_whitespace()) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Specials first, then the sorted unique words of `corpus`.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Self {
        let words: BTreeSet<String> = corpus
            .iter()
            .flat_map(|s| split_words(s.as_ref()))
            .collect();
        Self::from_words(words)
    }

    fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())));
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Non-special tokens, one per line; line `i` holds id `i + 4`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens[SPECIALS.len()..] {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut words = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() || line.contains(char::is_whitespace) {
                return Err(Error::Data(format!("vocabulary line {}: invalid token {line:?}", n + 1)));
            }
            if !seen.insert(line) {
                return Err(Error::Data(format!("vocabulary line {}: duplicate token {line:?}", n + 1)));
            }
            words.push(line.to_string());
        }
        Ok(Self::from_words(words))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// A padded id sequence with the position of its EOS marker.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenized {
    pub ids: Vec<usize>,
    pub eos: usize,
}

impl Tokenized {
    pub fn from_ids(ids: Vec<usize>) -> Result<Self> {
        let eos = ids.iter().position(|&i| i == EOS).ok_or(Error::MissingEos)?;
        Ok(Tokenized { ids, eos })
    }

    /// Ids up to and including EOS.
    pub fn active(&self) -> &[usize] {
        &self.ids[..=self.eos]
    }
}

/// `[SOS] words [EOS]` right-padded with PAD. Texts that do not fit are an
/// error rather than being truncated.
pub fn tokenize(text: &str, vocab: &Vocabulary, context_length: usize) -> Result<Tokenized> {
    let words = split_words(text);
    if words.len() + 2 > context_length {
        return Err(Error::PromptTooLong {
            tokens: words.len() + 2,
            context: context_length,
        });
    }
    let mut ids = Vec::with_capacity(context_length);
    ids.push(SOS);
    ids.extend(words.iter().map(|w| vocab.id(w).unwrap_or(UNK)));
    ids.push(EOS);
    let eos = ids.len() - 1;
    ids.resize(context_length, PAD);
    Ok(Tokenized { ids, eos })
}

/// Words between SOS and EOS, joined by single spaces.
pub fn detokenize(tokens: &Tokenized, vocab: &Vocabulary) -> String {
    tokens.ids[..tokens.eos]
        .iter()
        .filter(|&&i| i != SOS && i != PAD)
        .map(|&i| vocab.token(i).unwrap_or(SPECIALS[UNK]))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub train_negative: String,
    pub train_positive: String,
    pub zeroshot_negative: String,
    pub zeroshot_positive: String,
}

impl PromptSet {
    pub fn all(&self) -> [&str; 4] {
        [
            &self.train_negative,
            &self.train_positive,
            &self.zeroshot_negative,
            &self.zeroshot_positive,
        ]
    }

    /// Class order `[negative, positive]`.
    pub fn train_pair(&self) -> [&str; 2] {
        [&self.train_negative, &self.train_positive]
    }

    pub fn zeroshot_pair(&self) -> [&str; 2] {
        [&self.zeroshot_negative, &self.zeroshot_positive]
    }
}

pub fn canonical_prompts() -> PromptSet {
    PromptSet {
        train_negative: "This is a normal mammogram case with left craniocaudal, right craniocaudal, \
                         left mediolateral oblique, and right mediolateral oblique views, all showing \
                         no signs of abnormalities."
            .into(),
        train_positive: "This is an abnormal mammogram case with left craniocaudal, right craniocaudal, \
                         left mediolateral oblique, and right mediolateral oblique views, where \
                         abnormalities are present in one or more views."
            .into(),
        zeroshot_negative: "This is a normal mammogram case.".into(),
        zeroshot_positive: "This is an abnormal mammogram case.".into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub width: usize,
    pub heads: usize,
    pub depth: usize,
    pub embed_dim: usize,
}

impl TextEncoderConfig {
    pub fn desk(vocab_size: usize) -> Self {
        TextEncoderConfig {
            vocab_size,
            context_length: 64,
            width: 64,
            heads: 4,
            depth: 4,
            embed_dim: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("text: {msg}")));
        if self.vocab_size <= UNK {
            return bad(format!("vocab_size {} leaves no room for words", self.vocab_size));
        }
        if self.context_length < 2 {
            return bad("context_length must hold SOS and EOS".into());
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} is not divisible by {} heads", self.width, self.heads));
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive".into());
        }
        Ok(())
    }

    pub fn layout(&self) -> ParamLayout {
        let d = self.width;
        let mut l = ParamLayout::new();
        l.push(ParamDesc::new(
            "text.token_embed",
            [self.vocab_size, d],
            Init::TruncNormal { std: INIT_STD },
        ));
        l.push(ParamDesc::new(
            "text.pos_embed",
            [self.context_length, d],
            Init::TruncNormal { std: INIT_STD },
        ));
        for n in 0..self.depth {
            let prefix = format!("text.blocks.{n}");
            l.extend(BlockParams::layout(&prefix, d, &prefix));
        }
        l.push(ParamDesc::new(
            "text.proj.weight",
            [d, self.embed_dim],
            Init::TruncNormal { std: INIT_STD },
        ));
        l
    }

    pub fn host_stacks(&self) -> Vec<HostStack> {
        vec![HostStack::new("text.blocks", self.depth, self.width)]
    }
}

#[derive(Clone, Debug)]
pub struct TextParams {
    pub token_embed: Var,
    pub pos_embed: Var,
    pub blocks: Vec<BlockParams>,
    pub proj: Var,
}

impl TextParams {
    pub fn bind(p: &BoundParams, cfg: &TextEncoderConfig) -> Result<Self> {
        Ok(TextParams {
            token_embed: p.get("text.token_embed")?,
            pos_embed: p.get("text.pos_embed")?,
            blocks: (0..cfg.depth)
                .map(|n| BlockParams::bind(p, &format!("text.blocks.{n}"), cfg.heads))
                .collect::<Result<_>>()?,
            proj: p.get("text.proj.weight")?,
        })
    }
}

/// Causal blocks over already-embedded tokens `x: [T, D]`; positions are
/// added here.
pub fn hidden_from_embeddings<T: Real>(g: &mut Graph<T>, x: Var, params: &TextParams) -> Result<Var> {
    let len = g.shape(x)[0];
    let pos = g.slice(params.pos_embed, 0, 0, len)?;
    let h = g.add(x, pos)?;
    params
        .blocks
        .iter()
        .try_fold(h, |h, b| block_forward(g, h, b, true))
}

/// Token embedding lookup for `ids`: `[ids.len(), D]`.
pub fn embed_tokens<T: Real>(g: &mut Graph<T>, ids: &[usize], params: &TextParams) -> Result<Var> {
    Ok(g.gather_rows(params.token_embed, ids)?)
}

/// Hidden states of every position of `ids`, PAD tail included.
pub fn hidden_states<T: Real>(g: &mut Graph<T>, ids: &[usize], params: &TextParams) -> Result<Var> {
    let x = embed_tokens(g, ids, params)?;
    hidden_from_embeddings(g, x, params)
}

/// Text embedding `[1, D_e]`: the final hidden state at EOS, projected.
/// Positions after EOS cannot influence it under the causal mask, so only
/// the prefix up to EOS is computed.
pub fn encode_text<T: Real>(g: &mut Graph<T>, tokens: &Tokenized, params: &TextParams) -> Result<Var> {
    if tokens.ids.get(tokens.eos) != Some(&EOS) {
        return Err(Error::MissingEos);
    }
    let h = hidden_states(g, tokens.active(), params)?;
    let last = g.slice(h, 0, tokens.eos, 1)?;
    Ok(g.matmul(last, params.proj)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_strings_are_exact() {
        let p = canonical_prompts();
        assert_eq!(
            p.train_negative,
            "This is a normal mammogram case with left craniocaudal, right craniocaudal, left mediolateral oblique, and right mediolateral oblique views, all showing no signs of abnormalities."
        );
        assert_eq!(
            p.train_positive,
            "This is an abnormal mammogram case with left craniocaudal, right craniocaudal, left mediolateral oblique, and right mediolateral oblique views, where abnormalities are present in one or more views."
        );
        assert_eq!(p.zeroshot_negative, "This is a normal mammogram case.");
        assert_eq!(p.zeroshot_positive, "This is an abnormal mammogram case.");
        assert!(p.train_negative.ends_with("all showing no signs of abnormalities."));
        assert!(p.train_positive.contains("abnormalities are present in one or more views"));
    }

    #[test]
    fn vocab_from_prompts() {
        let v = Vocabulary::build(&canonical_prompts().all());
        for w in ["craniocaudal", "mediolateral", "oblique", "abnormal", "normal"] {
            assert!(v.id(w).is_some(), "{w}");
        }
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<unk>"), Some(UNK));
        assert_eq!(v, Vocabulary::build(&canonical_prompts().all()));
    }

    #[test]
    fn empty_entry_adds_nothing() {
        assert_eq!(Vocabulary::build(&["a b", ""]), Vocabulary::build(&["a b"]));
        assert_eq!(Vocabulary::build(&[""]).len(), 4);
    }

    #[test]
    fn split_keeps_punctuation() {
        assert_eq!(split_words("Hello, World."), ["hello", ",", "world", "."]);
    }

    #[test]
    fn tokenize_layout() {
        let v = Vocabulary::build(&["a b"]);
        let t = tokenize("", &v, 6).unwrap();
        assert_eq!(t.ids, [SOS, EOS, PAD, PAD, PAD, PAD]);
        assert_eq!(t.eos, 1);
        let t = tokenize("b zebra a", &v, 6).unwrap();
        assert_eq!(t.ids, [SOS, v.id("b").unwrap(), UNK, v.id("a").unwrap(), EOS, PAD]);
        assert!(matches!(
            tokenize("a b a b a", &v, 6),
            Err(Error::PromptTooLong { tokens: 7, context: 6 })
        ));
    }

    #[test]
    fn zero_shot_prompt_round_trips() {
        let p = canonical_prompts();
        let v = Vocabulary::build(&p.all());
        let t = tokenize(&p.zeroshot_negative, &v, 64).unwrap();
        assert_eq!(detokenize(&t, &v), split_words(&p.zeroshot_negative).join(" "));
    }

    #[test]
    fn vocab_text_round_trip() {
        let v = Vocabulary::build(&canonical_prompts().all());
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert!(Vocabulary::from_text("a\na\n").is_err());
    }

    #[test]
    fn missing_eos_is_an_error() {
        assert!(matches!(Tokenized::from_ids(vec![SOS, 5, PAD]), Err(Error::MissingEos)));
    }

    #[test]
    fn canonical_prompts_fit_default_context() {
        let p = canonical_prompts();
        let longest = p.all().iter().map(|s| split_words(s).len()).max().unwrap();
        assert!(longest + 2 <= TextEncoderConfig::desk(10).context_length);
    }
}
