//! Pre-tokenization: merges never cross a piece boundary.
//!
//! Pieces are maximal runs of ASCII whitespace, maximal runs of other ASCII
//! bytes, single non-ASCII characters, and single bytes of invalid UTF-8.
//! Isolating non-ASCII characters keeps each Chinese character its own
//! piece, so an atomic extension token always replaces its whole encoding.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Piece<'a> {
    Ascii(&'a [u8]),
    Char(char, &'a [u8]),
    Invalid(&'a [u8]),
}

impl<'a> Piece<'a> {
    pub(crate) fn bytes(&self) -> &'a [u8] {
        match *self {
            Piece::Ascii(b) | Piece::Char(_, b) | Piece::Invalid(b) => b,
        }
    }
}

pub(crate) fn pieces(bytes: &[u8]) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    for chunk in bytes.utf8_chunks() {
        let valid = chunk.valid();
        let vb = valid.as_bytes();
        let mut i = 0;
        while i < vb.len() {
            let b = vb[i];
            if b.is_ascii() {
                let ws = b.is_ascii_whitespace();
                let start = i;
                while i < vb.len() && vb[i].is_ascii() && vb[i].is_ascii_whitespace() == ws {
                    i += 1;
                }
                out.push(Piece::Ascii(&vb[start..i]));
            } else {
                let c = valid[i..].chars().next().expect("index on a char boundary");
                let n = c.len_utf8();
                out.push(Piece::Char(c, &vb[i..i + n]));
                i += n;
            }
        }
        for k in 0..chunk.invalid().len() {
            out.push(Piece::Invalid(&chunk.invalid()[k..k + 1]));
        }
    }
    out
}
