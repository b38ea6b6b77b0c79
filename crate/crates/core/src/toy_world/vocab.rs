/// Layout of the text vocabulary shared by the corpus and the language model:
/// phonemes first, then dialect descriptors, emotion descriptors and four
/// special tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TextVocab {
    pub alphabet: usize,
    pub dialects: usize,
    pub emotions: usize,
}

impl TextVocab {
    pub fn new(alphabet: usize, dialects: usize, emotions: usize) -> Self {
        Self {
            alphabet,
            dialects,
            emotions,
        }
    }

    pub fn dialect_token(&self, d: usize) -> usize {
        self.alphabet + d
    }

    pub fn emotion_token(&self, e: usize) -> usize {
        self.alphabet + self.dialects + e
    }

    fn specials(&self) -> usize {
        self.alphabet + self.dialects + self.emotions
    }

    pub fn bos(&self) -> usize {
        self.specials()
    }

    /// Separates a query from what follows it.
    pub fn sep(&self) -> usize {
        self.specials() + 1
    }

    /// Marks the end of streamed response text.
    pub fn eot(&self) -> usize {
        self.specials() + 2
    }

    pub fn pad(&self) -> usize {
        self.specials() + 3
    }

    pub fn size(&self) -> usize {
        self.specials() + 4
    }

    pub fn is_phoneme(&self, t: usize) -> bool {
        t < self.alphabet
    }

    pub fn as_dialect(&self, t: usize) -> Option<usize> {
        (t >= self.alphabet && t < self.alphabet + self.dialects).then(|| t - self.alphabet)
    }

    pub fn as_emotion(&self, t: usize) -> Option<usize> {
        let base = self.alphabet + self.dialects;
        (t >= base && t < base + self.emotions).then(|| t - base)
    }

    /// `[dialect descriptor, emotion descriptor]`.
    pub fn descriptor_prefix(&self, dialect: usize, emotion: usize) -> Vec<usize> {
        vec![self.dialect_token(dialect), self.emotion_token(emotion)]
    }
}
