//! Byte-oriented rANS coder over 16-bit frequency tables.
//!
//! Encoding runs over the symbols in reverse so decoding is a forward
//! scan. The 32-bit state renormalizes through 16-bit words; the stream
//! ends with a 4-byte trailer holding the final encoder state XORed with
//! a CRC-32 of the payload words. The decoder recovers its seed by
//! recomputing the checksum, so damage anywhere in the payload poisons
//! the seed, and after consuming every word the decoder must land back
//! on the initial state exactly. The checksum is what makes that check
//! bite: frequency-1 slots (escape literals, deep tail bins) carry their
//! payload in state bits that are discarded on decode, so a flip there
//! would otherwise change the output without disturbing the state.
//!
//! Values outside a table's explicit range are sent as the table's escape
//! symbol followed by the raw 32-bit value in two frequency-1 pushes
//! (a frequency-1 slot maps `state -> state * 2^16 + word` exactly, so
//! each push carries 16 literal bits).

use thiserror::Error;

use crate::entropy::{EntropyTable, FREQ_TOTAL, PRECISION_BITS};

/// Renormalization keeps the state in `[LOWER, LOWER << 16)`.
const LOWER: u32 = 1 << 16;

#[derive(Debug, Error, PartialEq)]
pub enum CoderError {
    #[error("table index {got} out of range (have {count} tables)")]
    TableIndex { got: usize, count: usize },
    #[error("symbol and table-index sequences differ in length: {symbols} vs {indices}")]
    LengthMismatch { symbols: usize, indices: usize },
    #[error("stream truncated: needed {needed} more bytes")]
    Truncated { needed: usize },
    #[error("stream corrupt: {reason}")]
    Corrupt { reason: &'static str },
}

/// Encodes one value per `(value, table index)` pair into a self-checking
/// byte stream. Values outside their table's range are escaped.
pub fn rans_encode(
    values: &[i64],
    table_indices: &[usize],
    tables: &[EntropyTable],
) -> Result<Vec<u8>, CoderError> {
    if values.len() != table_indices.len() {
        return Err(CoderError::LengthMismatch {
            symbols: values.len(),
            indices: table_indices.len(),
        });
    }
    for &ti in table_indices {
        if ti >= tables.len() {
            return Err(CoderError::TableIndex {
                got: ti,
                count: tables.len(),
            });
        }
    }

    let mut state: u32 = LOWER;
    let mut words: Vec<u16> = Vec::with_capacity(values.len());

    let push = |state: &mut u32, words: &mut Vec<u16>, start: u32, freq: u32| {
        // Renormalize until the post-push state stays below LOWER << 16.
        let cap = freq << PRECISION_BITS;
        while *state >= cap {
            words.push((*state & 0xffff) as u16);
            *state >>= 16;
        }
        *state = ((*state / freq) << PRECISION_BITS) + (*state % freq) + start;
    };

    // Reverse order; the decoder then produces symbols forward.
    for (&v, &ti) in values.iter().zip(table_indices).rev() {
        let t = &tables[ti];
        match t.index_of_value(v) {
            Some(sym) => push(&mut state, &mut words, t.start(sym), t.freq(sym)),
            None => {
                let raw = i32::try_from(v).map_err(|_| CoderError::Corrupt {
                    reason: "escaped value exceeds 32 bits",
                })? as u32;
                // The decoder sees: escape, then low word, then high word.
                push(&mut state, &mut words, (raw >> 16) & 0xffff, 1);
                push(&mut state, &mut words, raw & 0xffff, 1);
                let esc = t.escape_index();
                push(&mut state, &mut words, t.start(esc), t.freq(esc));
            }
        }
    }

    // Words were produced back-to-front relative to decode order.
    let mut out = Vec::with_capacity(words.len() * 2 + 4);
    for w in words.iter().rev() {
        out.extend_from_slice(&w.to_le_bytes());
    }
    let tag = state ^ crc32fast::hash(&out);
    out.extend_from_slice(&tag.to_le_bytes());
    Ok(out)
}

/// Decodes exactly `table_indices.len()` values. The seed comes from the
/// trailer XOR the payload checksum, and the state must return to its
/// initial value with every word consumed; anything else is an error,
/// never a silent wrong answer.
pub fn rans_decode(
    bytes: &[u8],
    table_indices: &[usize],
    tables: &[EntropyTable],
) -> Result<Vec<i64>, CoderError> {
    for &ti in table_indices {
        if ti >= tables.len() {
            return Err(CoderError::TableIndex {
                got: ti,
                count: tables.len(),
            });
        }
    }
    if bytes.len() < 4 {
        return Err(CoderError::Truncated {
            needed: 4 - bytes.len(),
        });
    }
    if (bytes.len() - 4) % 2 != 0 {
        return Err(CoderError::Corrupt {
            reason: "payload length is odd",
        });
    }
    let (payload, trailer) = bytes.split_at(bytes.len() - 4);
    let tag = u32::from_le_bytes(trailer.try_into().unwrap());
    let mut state = tag ^ crc32fast::hash(payload);
    if state < LOWER {
        return Err(CoderError::Corrupt {
            reason: "trailer state below renormalization floor",
        });
    }
    let mut next_word = 0usize;
    let n_words = payload.len() / 2;
    let word_at = |i: usize| u16::from_le_bytes([payload[2 * i], payload[2 * i + 1]]);

    // Inverts one push: `start`/`freq` must describe the slot the current
    // state's low bits fall in. For the raw 16-bit literal pushes
    // (freq 1, start = the word itself) the slot IS the payload.
    let advance = |state: &mut u32, next_word: &mut usize, start: u32, freq: u32| -> Result<(), CoderError> {
        let slot = *state & (FREQ_TOTAL - 1);
        *state = freq * (*state >> PRECISION_BITS) + slot - start;
        while *state < LOWER {
            if *next_word >= n_words {
                return Err(CoderError::Corrupt {
                    reason: "ran out of payload words mid-stream",
                });
            }
            *state = (*state << 16) | word_at(*next_word) as u32;
            *next_word += 1;
        }
        Ok(())
    };

    let mut out = Vec::with_capacity(table_indices.len());
    for &ti in table_indices {
        let t = &tables[ti];
        let slot = state & (FREQ_TOTAL - 1);
        let sym = t.find_slot(slot);
        advance(&mut state, &mut next_word, t.start(sym), t.freq(sym))?;
        if sym == t.escape_index() {
            let lo = state & (FREQ_TOTAL - 1);
            advance(&mut state, &mut next_word, lo, 1)?;
            let hi = state & (FREQ_TOTAL - 1);
            advance(&mut state, &mut next_word, hi, 1)?;
            let raw = (hi << 16) | lo;
            out.push(raw as i32 as i64);
        } else {
            out.push(t.value_of_index(sym));
        }
    }

    if next_word != n_words {
        return Err(CoderError::Corrupt {
            reason: "payload words left over after final symbol",
        });
    }
    if state != LOWER {
        return Err(CoderError::Corrupt {
            reason: "final state does not match the stream seed",
        });
    }
    Ok(out)
}

/// Ideal information content of a stream against its tables, in bits:
/// escapes cost their table probability plus 32 raw bits.
pub fn stream_cost_bits(values: &[i64], table_indices: &[usize], tables: &[EntropyTable]) -> f64 {
    values
        .iter()
        .zip(table_indices)
        .map(|(&v, &ti)| {
            let t = &tables[ti];
            match t.index_of_value(v) {
                Some(sym) => -t.prob(sym).log2(),
                None => -t.prob(t.escape_index()).log2() + 32.0,
            }
        })
        .sum()
}
