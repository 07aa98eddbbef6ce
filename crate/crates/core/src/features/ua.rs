use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceType {
    Smartphone,
    Tablet,
    Pc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Os {
    Android,
    Ios,
    Windows,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interaction {
    App,
    MobileWeb,
    DesktopWeb,
}

impl DeviceType {
    pub const ALL: [DeviceType; 3] = [DeviceType::Smartphone, DeviceType::Tablet, DeviceType::Pc];
    pub fn as_str(self) -> &'static str {
        match self {
            DeviceType::Smartphone => "smartphone",
            DeviceType::Tablet => "tablet",
            DeviceType::Pc => "pc",
        }
    }
}

impl Os {
    pub const ALL: [Os; 4] = [Os::Android, Os::Ios, Os::Windows, Os::Other];
    pub fn as_str(self) -> &'static str {
        match self {
            Os::Android => "android",
            Os::Ios => "ios",
            Os::Windows => "windows",
            Os::Other => "other",
        }
    }
}

impl Interaction {
    pub const ALL: [Interaction; 3] = [Interaction::App, Interaction::MobileWeb, Interaction::DesktopWeb];
    pub fn as_str(self) -> &'static str {
        match self {
            Interaction::App => "app",
            Interaction::MobileWeb => "mobile_web",
            Interaction::DesktopWeb => "desktop_web",
        }
    }
}

/// What the user agent reveals about the device and how it was used.
/// `interaction == App` only ever pairs with a mobile device type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub device_type: DeviceType,
    pub os: Os,
    pub interaction: Interaction,
}

impl DeviceProfile {
    pub const DESKTOP_FALLBACK: DeviceProfile =
        DeviceProfile { device_type: DeviceType::Pc, os: Os::Other, interaction: Interaction::DesktopWeb };
}

fn has(ua: &str, needle: &str) -> bool {
    ua.contains(needle)
}

/// Classifies a User-Agent header.
///
/// App traffic is recognized by the runtime fingerprints HTTP stacks leak:
/// `Dalvik`/`okhttp` on Android, `CFNetwork`/`Darwin` on iOS, and embedded
/// web views (`; wv)` on Android, an iOS `Mobile/` build without `Safari/`).
pub fn parse_user_agent(ua: &str) -> DeviceProfile {
    let ua = ua.trim();
    if ua.is_empty() {
        return DeviceProfile::DESKTOP_FALLBACK;
    }
    let lower = ua.to_ascii_lowercase();

    if has(&lower, "windows phone") || has(&lower, "iemobile") {
        return DeviceProfile {
            device_type: DeviceType::Smartphone,
            os: Os::Windows,
            interaction: Interaction::MobileWeb,
        };
    }

    let is_ipad = has(&lower, "ipad");
    let is_iphone = has(&lower, "iphone") || has(&lower, "ipod");
    let ios_runtime = has(&lower, "cfnetwork") || (has(&lower, "darwin") && !has(&lower, "mozilla"));
    if is_ipad || is_iphone || ios_runtime {
        let device_type = if is_ipad { DeviceType::Tablet } else { DeviceType::Smartphone };
        let browser =
            has(&lower, "mozilla") && (has(&lower, "safari/") || has(&lower, "crios") || has(&lower, "fxios"));
        let interaction = if ios_runtime || !browser { Interaction::App } else { Interaction::MobileWeb };
        return DeviceProfile { device_type, os: Os::Ios, interaction };
    }

    let android_runtime = has(&lower, "dalvik") || has(&lower, "okhttp");
    if has(&lower, "android") || android_runtime {
        let tablet_hint =
            has(&lower, "tablet") || has(&lower, "sm-t") || has(&lower, "nexus 7") || has(&lower, "nexus 9");
        let device_type = if android_runtime {
            if tablet_hint {
                DeviceType::Tablet
            } else {
                DeviceType::Smartphone
            }
        } else if tablet_hint || !has(&lower, "mobile") {
            DeviceType::Tablet
        } else {
            DeviceType::Smartphone
        };
        let interaction =
            if android_runtime || has(&lower, "; wv)") { Interaction::App } else { Interaction::MobileWeb };
        return DeviceProfile { device_type, os: Os::Android, interaction };
    }

    if has(&lower, "windows nt") || has(&lower, "windows ") {
        return DeviceProfile { device_type: DeviceType::Pc, os: Os::Windows, interaction: Interaction::DesktopWeb };
    }

    DeviceProfile::DESKTOP_FALLBACK
}

#[cfg(test)]
mod tests {
    use super::*;
    use DeviceType::*;
    use Interaction::*;
    use Os::{Android, Ios, Other, Windows};

    /// Hand-labeled golden corpus.
    const CORPUS: &[(&str, DeviceType, Os, Interaction)] = &[
        ("Dalvik/2.1.0 (Linux; U; Android 5.1; Nexus 5 Build/LMY47I)", Smartphone, Android, App),
        ("Dalvik/2.1.0 (Linux; U; Android 6.0.1; SM-G920F Build/MMB29K)", Smartphone, Android, App),
        ("Dalvik/1.6.0 (Linux; U; Android 4.4.2; GT-I9505 Build/KOT49H)", Smartphone, Android, App),
        ("Dalvik/2.1.0 (Linux; U; Android 5.0.2; SM-T530 Build/LRX22G)", Tablet, Android, App),
        ("Dalvik/2.1.0 (Linux; U; Android 6.0; Nexus 9 Build/MRA58K)", Tablet, Android, App),
        ("okhttp/3.2.0", Smartphone, Android, App),
        ("Mozilla/5.0 (Linux; Android 5.1.1; Nexus 5 Build/LMY48B; wv) AppleWebKit/537.36 (KHTML, like Gecko) Version/4.0 Chrome/43.0.2357.65 Mobile Safari/537.36", Smartphone, Android, App),
        ("Mozilla/5.0 (Linux; Android 6.0; SM-G900F Build/MMB29M; wv) AppleWebKit/537.36 (KHTML, like Gecko) Version/4.0 Chrome/49.0 Mobile Safari/537.36", Smartphone, Android, App),
        ("Mozilla/5.0 (Linux; Android 5.1; SM-G925F Build/LMY47X) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/46.0.2490.76 Mobile Safari/537.36", Smartphone, Android, MobileWeb),
        ("Mozilla/5.0 (Linux; Android 4.4.4; Nexus 5 Build/KTU84P) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/38.0.2125.102 Mobile Safari/537.36", Smartphone, Android, MobileWeb),
        ("Mozilla/5.0 (Linux; U; Android 4.2.2; es-es; GT-I9195 Build/JDQ39) AppleWebKit/534.30 (KHTML, like Gecko) Version/4.0 Mobile Safari/534.30", Smartphone, Android, MobileWeb),
        ("Mozilla/5.0 (Android 5.1; Mobile; rv:42.0) Gecko/42.0 Firefox/42.0", Smartphone, Android, MobileWeb),
        ("Mozilla/5.0 (Linux; Android 5.0.2; SM-T530 Build/LRX22G) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/45.0.2454.84 Safari/537.36", Tablet, Android, MobileWeb),
        ("Mozilla/5.0 (Linux; Android 6.0.1; Nexus 7 Build/MOB30X) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/50.0 Safari/537.36", Tablet, Android, MobileWeb),
        ("Mozilla/5.0 (Linux; Android 4.4.2; Lenovo TAB 2 A10-70F Build/KOT49H) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/44.0 Safari/537.36", Tablet, Android, MobileWeb),
        ("Mozilla/5.0 (Android 5.1; Tablet; rv:41.0) Gecko/41.0 Firefox/41.0", Tablet, Android, MobileWeb),
        ("Mozilla/5.0 (iPhone; CPU iPhone OS 9_3_2 like Mac OS X) AppleWebKit/601.1.46 (KHTML, like Gecko) Version/9.0 Mobile/13F69 Safari/601.1", Smartphone, Ios, MobileWeb),
        ("Mozilla/5.0 (iPhone; CPU iPhone OS 8_4 like Mac OS X) AppleWebKit/600.1.4 (KHTML, like Gecko) Version/8.0 Mobile/12H143 Safari/600.1.4", Smartphone, Ios, MobileWeb),
        ("Mozilla/5.0 (iPhone; CPU iPhone OS 9_1 like Mac OS X) AppleWebKit/601.1.46 (KHTML, like Gecko) CriOS/47.0.2526.70 Mobile/13B143 Safari/601.1.46", Smartphone, Ios, MobileWeb),
        ("Mozilla/5.0 (iPhone; CPU iPhone OS 9_2 like Mac OS X) AppleWebKit/601.1.46 (KHTML, like Gecko) FxiOS/1.4 Mobile/13C75 Safari/601.1.46", Smartphone, Ios, MobileWeb),
        ("Mozilla/5.0 (iPod touch; CPU iPhone OS 9_3 like Mac OS X) AppleWebKit/601.1.46 (KHTML, like Gecko) Version/9.0 Mobile/13E233 Safari/601.1", Smartphone, Ios, MobileWeb),
        ("Mozilla/5.0 (iPhone; CPU iPhone OS 9_3_2 like Mac OS X) AppleWebKit/601.1.46 (KHTML, like Gecko) Mobile/13F69", Smartphone, Ios, App),
        ("Mozilla/5.0 (iPhone; CPU iPhone OS 8_1 like Mac OS X) AppleWebKit/600.1.4 (KHTML, like Gecko) Mobile/12B411 [FBAN/FBIOS;FBAV/20.1.0.15.10]", Smartphone, Ios, App),
        ("Twitter/6.45 CFNetwork/758.3.15 Darwin/15.4.0", Smartphone, Ios, App),
        ("MyApp/1.0 CFNetwork/711.4.6 Darwin/14.0.0", Smartphone, Ios, App),
        ("Instagram 8.0.0 (iPhone7,2; iPhone OS 9_3_2; es_ES; es-ES; scale=2.00; 750x1334) AppleWebKit/420+", Smartphone, Ios, App),
        ("Mozilla/5.0 (iPad; CPU OS 9_3 like Mac OS X) AppleWebKit/601.1.46 (KHTML, like Gecko) Version/9.0 Mobile/13E234 Safari/601.1", Tablet, Ios, MobileWeb),
        ("Mozilla/5.0 (iPad; CPU OS 8_4_1 like Mac OS X) AppleWebKit/600.1.4 (KHTML, like Gecko) Version/8.0 Mobile/12H321 Safari/600.1.4", Tablet, Ios, MobileWeb),
        ("Mozilla/5.0 (iPad; CPU OS 9_3_2 like Mac OS X) AppleWebKit/601.1.46 (KHTML, like Gecko) CriOS/51.0.2704.64 Mobile/13F69 Safari/601.1.46", Tablet, Ios, MobileWeb),
        ("Mozilla/5.0 (iPad; CPU OS 9_3_2 like Mac OS X) AppleWebKit/601.1.46 (KHTML, like Gecko) Mobile/13F69", Tablet, Ios, App),
        ("Mozilla/5.0 (iPad; CPU OS 9_0 like Mac OS X) AppleWebKit/601.1.46 (KHTML, like Gecko) Mobile/13A344 [FBAN/FBIOS;FBDV/iPad4,1]", Tablet, Ios, App),
        ("Mozilla/5.0 (Windows Phone 10.0; Android 4.2.1; Microsoft; Lumia 950) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/46.0 Mobile Safari/537.36 Edge/13.10586", Smartphone, Windows, MobileWeb),
        ("Mozilla/5.0 (compatible; MSIE 10.0; Windows Phone 8.0; Trident/6.0; IEMobile/10.0; ARM; Touch; NOKIA; Lumia 920)", Smartphone, Windows, MobileWeb),
        ("Mozilla/5.0 (Mobile; Windows Phone 8.1; Android 4.0; ARM; Trident/7.0; Touch; rv:11.0; IEMobile/11.0; NOKIA; Lumia 635) like iPhone OS 7_0_3 Mac OS X AppleWebKit/537 (KHTML, like Gecko) Mobile Safari/537", Smartphone, Windows, MobileWeb),
        ("Mozilla/5.0 (Windows NT 10.0; Win64; x64) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/51.0.2704.103 Safari/537.36", Pc, Windows, DesktopWeb),
        ("Mozilla/5.0 (Windows NT 6.1; WOW64; rv:47.0) Gecko/20100101 Firefox/47.0", Pc, Windows, DesktopWeb),
        ("Mozilla/5.0 (Windows NT 6.3; Trident/7.0; rv:11.0) like Gecko", Pc, Windows, DesktopWeb),
        ("Mozilla/4.0 (compatible; MSIE 8.0; Windows NT 5.1; Trident/4.0)", Pc, Windows, DesktopWeb),
        ("Mozilla/5.0 (Windows NT 10.0; Win64; x64) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/46.0 Safari/537.36 Edge/13.10586", Pc, Windows, DesktopWeb),
        ("Mozilla/5.0 (Macintosh; Intel Mac OS X 10_11_5) AppleWebKit/601.6.17 (KHTML, like Gecko) Version/9.1.1 Safari/601.6.17", Pc, Other, DesktopWeb),
        ("Mozilla/5.0 (Macintosh; Intel Mac OS X 10.11; rv:47.0) Gecko/20100101 Firefox/47.0", Pc, Other, DesktopWeb),
        ("Mozilla/5.0 (X11; Linux x86_64) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/51.0.2704.103 Safari/537.36", Pc, Other, DesktopWeb),
        ("Mozilla/5.0 (X11; Ubuntu; Linux x86_64; rv:46.0) Gecko/20100101 Firefox/46.0", Pc, Other, DesktopWeb),
        ("Mozilla/5.0 (X11; CrOS x86_64 8172.45.0) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/51.0.2704.64 Safari/537.36", Pc, Other, DesktopWeb),
        ("curl/7.47.0", Pc, Other, DesktopWeb),
        ("Wget/1.17.1 (linux-gnu)", Pc, Other, DesktopWeb),
        ("Googlebot/2.1 (+http://www.google.com/bot.html)", Pc, Other, DesktopWeb),
        ("Java/1.8.0_91", Pc, Other, DesktopWeb),
        ("python-requests/2.10.0", Pc, Other, DesktopWeb),
        ("", Pc, Other, DesktopWeb),
    ];

    #[test]
    fn golden_corpus() {
        assert_eq!(CORPUS.len(), 50);
        for (ua, device_type, os, interaction) in CORPUS {
            let got = parse_user_agent(ua);
            assert_eq!(got, DeviceProfile { device_type: *device_type, os: *os, interaction: *interaction }, "{ua}");
        }
    }

    #[test]
    fn app_only_on_mobile() {
        for (ua, ..) in CORPUS {
            let p = parse_user_agent(ua);
            if p.interaction == App {
                assert_ne!(p.device_type, Pc, "{ua}");
            }
        }
    }
}
