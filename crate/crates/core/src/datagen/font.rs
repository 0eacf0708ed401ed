//! 5x7 bitmap glyphs and the caption vocabulary.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

pub const GLYPH_W: usize = 5;
pub const GLYPH_H: usize = 7;

pub const ALPHABET: &str = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

#[rustfmt::skip]
const BITMAPS: [[&str; GLYPH_H]; 36] = [
    [".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"], // A
    ["####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."], // B
    [".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."], // C
    ["####.", "#...#", "#...#", "#...#", "#...#", "#...#", "####."], // D
    ["#####", "#....", "#....", "####.", "#....", "#....", "#####"], // E
    ["#####", "#....", "#....", "####.", "#....", "#....", "#...."], // F
    [".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".####"], // G
    ["#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"], // H
    [".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."], // I
    ["..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."], // J
    ["#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"], // K
    ["#....", "#....", "#....", "#....", "#....", "#....", "#####"], // L
    ["#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"], // M
    ["#...#", "#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#"], // N
    [".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."], // O
    ["####.", "#...#", "#...#", "####.", "#....", "#....", "#...."], // P
    [".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"], // Q
    ["####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"], // R
    [".####", "#....", "#....", ".###.", "....#", "....#", "####."], // S
    ["#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."], // T
    ["#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."], // U
    ["#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."], // V
    ["#...#", "#...#", "#...#", "#.#.#", "#.#.#", "#.#.#", ".#.#."], // W
    ["#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"], // X
    ["#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."], // Y
    ["#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"], // Z
    [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."], // 0
    ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."], // 1
    [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"], // 2
    ["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."], // 3
    ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."], // 4
    ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."], // 5
    ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."], // 6
    ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."], // 7
    [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."], // 8
    [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."], // 9
];

pub const NUM_GLYPHS: usize = BITMAPS.len();

/// Glyph index in `0..NUM_GLYPHS`.
pub type GlyphId = usize;

/// Whether pixel `(row, col)` of glyph `g` is inked.
pub fn glyph_pixel(g: GlyphId, row: usize, col: usize) -> bool {
    BITMAPS[g][row].as_bytes()[col] == b'#'
}

pub fn glyph_char(g: GlyphId) -> char {
    ALPHABET.as_bytes()[g] as char
}

pub fn glyph_of_char(c: char) -> Option<GlyphId> {
    ALPHABET.find(c.to_ascii_uppercase())
}

pub fn glyphs_to_string(glyphs: &[GlyphId]) -> String {
    glyphs.iter().map(|&g| glyph_char(g)).collect()
}

/// Parses a caption string; rejects characters outside the alphabet.
pub fn parse_glyphs(text: &str) -> Result<Vec<GlyphId>> {
    text.chars()
        .enumerate()
        .map(|(i, c)| match glyph_of_char(c) {
            Some(g) => Ok(g),
            None => contract!(
                "character {:?} at position {} is not in the glyph alphabet {}",
                c,
                i,
                ALPHABET
            ),
        })
        .collect()
}

/// Prompt wrappers around the glyph string.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptTemplate {
    /// The glyph string alone.
    Terse,
    /// `THE TEXT READS <glyphs>`.
    Verbose,
}

/// Token ids: pad, three template words, then one token per glyph.
pub mod vocab {
    use super::*;

    pub const PAD: usize = 0;
    pub const THE: usize = 1;
    pub const TEXT: usize = 2;
    pub const READS: usize = 3;
    pub const GLYPH_BASE: usize = 4;
    pub const SIZE: usize = GLYPH_BASE + NUM_GLYPHS;
    pub const VERBOSE_PREFIX: [usize; 3] = [THE, TEXT, READS];

    pub fn glyph_token(g: GlyphId) -> usize {
        GLYPH_BASE + g
    }

    /// Longest token sequence a caption of `n_glyphs` can produce.
    pub fn max_len(n_glyphs: usize) -> usize {
        VERBOSE_PREFIX.len() + n_glyphs
    }

    /// Wraps glyphs in a template and pads to `max_len`. An empty glyph list
    /// gives the empty caption (all pad).
    pub fn encode(glyphs: &[GlyphId], template: PromptTemplate, max_len: usize) -> Result<Vec<usize>> {
        let mut ids = Vec::with_capacity(max_len);
        if !glyphs.is_empty() && template == PromptTemplate::Verbose {
            ids.extend_from_slice(&VERBOSE_PREFIX);
        }
        for &g in glyphs {
            if g >= NUM_GLYPHS {
                contract!("glyph id {} outside alphabet", g);
            }
            ids.push(glyph_token(g));
        }
        if ids.len() > max_len {
            contract!("caption needs {} tokens but max length is {}", ids.len(), max_len);
        }
        ids.resize(max_len, PAD);
        Ok(ids)
    }

    pub fn empty(max_len: usize) -> Vec<usize> {
        vec![PAD; max_len]
    }
}
