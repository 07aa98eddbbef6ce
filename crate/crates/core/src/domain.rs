//! Hostname helpers shared by the classifier, the detector and the feature
//! extractor.

/// Second-level labels that sit under a country-code TLD and act as a public
/// suffix (`co.uk`, `com.es`, ...).
const SECOND_LEVEL_SUFFIXES: &[&str] = &["ac", "co", "com", "edu", "gob", "gov", "net", "nom", "org"];

/// The registrable ("site") part of a hostname: the last two labels, or three
/// when the TLD is a two-letter country code preceded by a generic second
/// level (`shop.example.co.uk` -> `example.co.uk`).
pub fn registrable_domain(host: &str) -> &str {
    let host = host.trim_end_matches('.');
    let labels: Vec<&str> = host.rsplitn(4, '.').collect();
    let keep =
        if labels.len() >= 3 && labels[0].len() == 2 && SECOND_LEVEL_SUFFIXES.contains(&labels[1]) { 3 } else { 2 };
    if labels.len() <= keep {
        return host;
    }
    let tail_len: usize = labels[..keep].iter().map(|l| l.len()).sum::<usize>() + keep - 1;
    &host[host.len() - tail_len..]
}

/// True when `host` equals `suffix` or ends with `.suffix`.
pub fn host_matches_suffix(host: &str, suffix: &str) -> bool {
    if host.len() == suffix.len() {
        return host.eq_ignore_ascii_case(suffix);
    }
    host.len() > suffix.len()
        && host.as_bytes()[host.len() - suffix.len() - 1] == b'.'
        && host[host.len() - suffix.len()..].eq_ignore_ascii_case(suffix)
}

/// Every dot-separated suffix of `host`, longest first:
/// `a.b.c` yields `a.b.c`, `b.c`, `c`.
pub fn suffixes(host: &str) -> impl Iterator<Item = &str> {
    std::iter::once(host).chain(host.char_indices().filter(|&(_, c)| c == '.').map(move |(i, _)| &host[i + 1..]))
}

/// Extracts the host from a value that is either a bare hostname or a URL
/// (`http://beacon-eu2.rubiconproject.com/beacon/t/...`).
pub fn host_of(value: &str) -> Option<String> {
    let value = value.trim();
    if value.is_empty() {
        return None;
    }
    if value.contains("://") {
        return url::Url::parse(value).ok().and_then(|u| u.host_str().map(|h| h.to_ascii_lowercase()));
    }
    let host = value.split(['/', '?', '#', ':']).next()?;
    let valid = !host.is_empty()
        && host.contains('.')
        && host.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'.' || b == b'-');
    valid.then(|| host.to_ascii_lowercase())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registrable_domains() {
        assert_eq!(registrable_domain("beacon-eu2.rubiconproject.com"), "rubiconproject.com");
        assert_eq!(registrable_domain("rubiconproject.com"), "rubiconproject.com");
        assert_eq!(registrable_domain("localhost"), "localhost");
        assert_eq!(registrable_domain("a.b.example.co.uk"), "example.co.uk");
        assert_eq!(registrable_domain("www.elpais.com.es"), "elpais.com.es");
        assert_eq!(registrable_domain("cpp.imp.mpx.mopub.com"), "mopub.com");
    }

    #[test]
    fn suffix_matching_respects_label_boundaries() {
        assert!(host_matches_suffix("ads.doubleclick.net", "doubleclick.net"));
        assert!(host_matches_suffix("doubleclick.net", "doubleclick.net"));
        assert!(!host_matches_suffix("notdoubleclick.net", "doubleclick.net"));
        assert!(!host_matches_suffix("net", "doubleclick.net"));
    }

    #[test]
    fn suffix_iteration() {
        let all: Vec<&str> = suffixes("sub.a.tracker.com").collect();
        assert_eq!(all, vec!["sub.a.tracker.com", "a.tracker.com", "tracker.com", "com"]);
    }

    #[test]
    fn host_extraction() {
        assert_eq!(
            host_of("http://beacon-eu2.rubiconproject.com/beacon/t/ce48").as_deref(),
            Some("beacon-eu2.rubiconproject.com")
        );
        assert_eq!(host_of("dsp.example.com").as_deref(), Some("dsp.example.com"));
        assert_eq!(host_of("ID"), None);
        assert_eq!(host_of(""), None);
    }
}
