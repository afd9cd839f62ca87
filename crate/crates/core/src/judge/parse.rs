//! Strict parsers for raw judge responses.

use serde::Deserialize;

use super::RawChoice;

pub fn parse_score(response: &str) -> Result<f64, String> {
    let text = response.trim();
    let value: f64 = text.parse().map_err(|_| format!("not a number: {text:?}"))?;
    if !value.is_finite() {
        return Err(format!("score is not finite: {value}"));
    }
    Ok(value)
}

/// Exact match on the four decision strings after trimming whitespace.
pub fn parse_verdict(response: &str) -> Result<RawChoice, String> {
    match response.trim() {
        "Image 1" => Ok(RawChoice::First),
        "Image 2" => Ok(RawChoice::Second),
        "Tie" => Ok(RawChoice::Tie),
        "Both are bad" => Ok(RawChoice::BothBad),
        other => Err(format!("not a decision string: {other:?}")),
    }
}

#[derive(Deserialize)]
struct RankBlock {
    rank: Vec<i64>,
}

/// Parses the trailing `{"rank": [...]}` block, which lists image numbers
/// from best to worst, into per-item ranks: `ranks[i]` is the rank of image
/// `i + 1`. The list must be a permutation of `1..=m`.
pub fn parse_ranking(response: &str, m: usize) -> Result<Vec<u32>, String> {
    let block = response
        .char_indices()
        .rev()
        .filter(|(_, c)| *c == '{')
        .find_map(|(start, _)| {
            serde_json::Deserializer::from_str(&response[start..])
                .into_iter::<RankBlock>()
                .next()
                .and_then(Result::ok)
        })
        .ok_or_else(|| "no {\"rank\": [...]} block".to_string())?;
    if block.rank.len() != m {
        return Err(format!("expected {m} entries, got {}", block.rank.len()));
    }
    let mut ranks = vec![0u32; m];
    for (position, &image) in block.rank.iter().enumerate() {
        if image < 1 || image as usize > m {
            return Err(format!("image number {image} outside 1..={m}"));
        }
        let slot = &mut ranks[image as usize - 1];
        if *slot != 0 {
            return Err(format!("image {image} ranked twice"));
        }
        *slot = position as u32 + 1;
    }
    Ok(ranks)
}

pub fn parse_embedding(response: &str) -> Result<Vec<f64>, String> {
    let vector: Vec<f64> =
        serde_json::from_str(response.trim()).map_err(|e| format!("not a JSON number array: {e}"))?;
    if vector.is_empty() {
        return Err("empty embedding".into());
    }
    if vector.iter().any(|x| !x.is_finite()) {
        return Err("embedding has non-finite components".into());
    }
    Ok(vector)
}
