#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "vila/error.hpp"
#include "vila/io.hpp"

namespace vila {

struct PromptPair {
  std::string good;
  std::string bad;
  bool operator==(const PromptPair&) const = default;
};

struct StylePrompts {
  std::string name;
  std::string single;                // the style-name prompt
  std::vector<std::string> ensemble;  // curated phrasings averaged in ensemble mode
  bool operator==(const StylePrompts&) const = default;
};

/// Prompt texts for zero-shot scoring, held as data.
struct PromptBank {
  std::string anchor = "good image";
  PromptPair single_pair{"good image", "bad image"};
  std::vector<PromptPair> iaa_pairs;
  std::vector<StylePrompts> styles;

  bool operator==(const PromptBank&) const = default;

  /// Every distinct prompt text, anchor first, in bank order.
  std::vector<std::string> all_texts() const {
    std::vector<std::string> out;
    auto add = [&out](const std::string& t) {
      for (const auto& s : out)
        if (s == t) return;
      out.push_back(t);
    };
    add(anchor);
    add(single_pair.good);
    add(single_pair.bad);
    for (const auto& p : iaa_pairs) {
      add(p.good);
      add(p.bad);
    }
    for (const auto& s : styles) {
      add(s.single);
      for (const auto& t : s.ensemble) add(t);
    }
    return out;
  }

  std::size_t style_index(const std::string& name) const {
    for (std::size_t i = 0; i < styles.size(); ++i)
      if (styles[i].name == name) return i;
    throw InvalidArgument("prompt bank: unknown style '" + name + "'");
  }
};

inline PromptBank default_prompt_bank() {
  PromptBank bank;
  for (const char* aspect : {"image", "lighting", "content", "background", "foreground", "composition"}) {
    bank.iaa_pairs.push_back({std::string("good ") + aspect, std::string("bad ") + aspect});
  }
  bank.styles = {
      {"Complementary_Colors",
       "complementary colors",
       {"complementary colors", "complementary color", "great complementary colors",
        "great use of complementary colors", "good use of complementary colors"}},
      {"Duotones",
       "duo tones",
       {"duo tones", "duotone", "nice duotone", "duotone works very well", "use of duotone"}},
      {"HDR", "hdr", {"hdr", "i like the hdr", "great job with the hdr", "hdr done well", "love the hdr shot"}},
      {"Image_Grain",
       "image grain",
       {"image grain", "i like the image grain", "nice use of image grain", "a good job with the image grain",
        "excellent use of image grain"}},
      {"Light_On_White",
       "light on white",
       {"light on white", "great for the light on white", "nice light on white", "love the light on white",
        "like the light on white"}},
      {"Long_Exposure",
       "long exposure",
       {"long exposure", "nice long exposure", "nice use of long exposure", "enjoy these long exposure shots",
        "look great with the long exposure"}},
      {"Macro", "macro", {"macro", "excellent detailed macro", "nice macro", "good macro shot", "great macro"}},
      {"Motion_Blur",
       "motion blur",
       {"motion blur", "nice motion blur", "great use of the motion blur", "i love the motion blur",
        "cool motion blur"}},
      {"Negative_Image",
       "negative image",
       {"negative image looks good", "love the negative images", "the negative image is captivating",
        "use of the negative image is interesting", "fan of the negative image"}},
      {"Rule_of_Thirds",
       "rule of thirds",
       {"rule of thirds", "benefited from the rule of thirds", "followed the rule of thirds nicely",
        "use of the rule of thirds is fantastic", "great use of rule of thirds"}},
      {"Shallow_DOF",
       "shallow dof",
       {"shallow dof", "nice shallow dof", "i love the shallow DOF", "lovely use of shallow DOF",
        "shallow dof works perfect here"}},
      {"Silhouettes",
       "silhouettes",
       {"silhouettes", "like the silhouettes", "great silhouettes", "i really like silhouettes",
        "silhouettes are lovely"}},
      {"Soft_Focus",
       "soft focus",
       {"soft focus", "love the soft focus", "love the effect of soft focus", "excellent use of soft focus",
        "lovely soft focus"}},
      {"Vanishing_Point",
       "vanishing point",
       {"vanishing point", "i like the lines and fading or vanishing", "i love the lines and vanishing point",
        "nice to see the vanishing point off of center", "the background with the vanishing point is nice"}},
  };
  return bank;
}

inline nlohmann::ordered_json to_json(const PromptBank& bank) {
  nlohmann::ordered_json j;
  j["anchor"] = bank.anchor;
  j["iaa_single"] = {bank.single_pair.good, bank.single_pair.bad};
  j["iaa_pairs"] = nlohmann::ordered_json::array();
  for (const auto& p : bank.iaa_pairs) j["iaa_pairs"].push_back({p.good, p.bad});
  j["styles"] = nlohmann::ordered_json::array();
  for (const auto& s : bank.styles) {
    nlohmann::ordered_json st;
    st["name"] = s.name;
    st["single"] = s.single;
    st["prompts"] = s.ensemble;
    j["styles"].push_back(std::move(st));
  }
  return j;
}

inline PromptBank prompt_bank_from_json(const nlohmann::json& j) {
  try {
    PromptBank bank;
    bank.anchor = j.at("anchor").get<std::string>();
    const auto single = j.at("iaa_single").get<std::vector<std::string>>();
    if (single.size() != 2) throw FormatError("prompt bank: iaa_single must hold two texts");
    bank.single_pair = {single[0], single[1]};
    for (const auto& p : j.at("iaa_pairs")) {
      const auto pair = p.get<std::vector<std::string>>();
      if (pair.size() != 2) throw FormatError("prompt bank: each iaa pair must hold two texts");
      bank.iaa_pairs.push_back({pair[0], pair[1]});
    }
    for (const auto& s : j.at("styles")) {
      StylePrompts st{s.at("name").get<std::string>(), s.at("single").get<std::string>(),
                      s.at("prompts").get<std::vector<std::string>>()};
      if (st.ensemble.empty()) throw FormatError("prompt bank: style '" + st.name + "' has no prompts");
      bank.styles.push_back(std::move(st));
    }
    return bank;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("prompt bank: ") + e.what());
  }
}

inline std::string serialize(const PromptBank& bank) { return to_json(bank).dump(2) + "\n"; }

inline PromptBank load_prompt_bank(const std::filesystem::path& path) {
  try {
    return prompt_bank_from_json(nlohmann::json::parse(io::read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace vila
