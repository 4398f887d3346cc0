//! Character classes shared by the tokenizer and the document pipeline.

/// CJK Unified Ideographs, Extension A, and Extensions B–F / G.
pub fn is_cjk_ideograph(c: char) -> bool {
    matches!(c as u32,
        0x4E00..=0x9FFF
        | 0x3400..=0x4DBF
        | 0x20000..=0x2EBEF
        | 0x30000..=0x3134F)
}

/// ASCII punctuation plus CJK symbols/punctuation and fullwidth forms.
pub fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c as u32,
            0x3000..=0x303F
            | 0xFF01..=0xFF0F
            | 0xFF1A..=0xFF20
            | 0xFF3B..=0xFF40
            | 0xFF5B..=0xFF65
            | 0x2010..=0x2027)
}
