/// At most `limit` characters; longer input ends in "...".
pub(crate) fn clip(text: &str, limit: usize) -> String {
    let trimmed = text.trim();
    if trimmed.chars().count() <= limit {
        return trimmed.to_string();
    }
    let mut cut: String = trimmed.chars().take(limit.saturating_sub(3)).collect();
    cut.push_str(&"..."[..limit.min(3)]);
    cut
}

pub(crate) fn first_line(text: &str) -> &str {
    text.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("")
}
