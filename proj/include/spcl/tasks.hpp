#pragma once

// Synthetic instruction tasks over a shared 64-token vocabulary.  Each task
// pairs a deterministic key->response rule with an instruction prefix
// (a response-format tag and a task tag), so streams of tasks with
// conflicting formats can be generated, along with the unlabeled inquiry
// text and the held-out general probe used by the harness.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "spcl/nn.hpp"
#include "spcl/rng.hpp"

namespace spcl::tasks {

// ---- vocabulary -----------------------------------------------------------
// 0 <eos>, 1 <sep>, 2 <unk>, 3..12 digits, 13..38 letters a..z,
// 39..44 options A..F, 45..56 instruction tags <t0>..<t11>, 57..63 filler.

constexpr int kVocabSize = 64;
constexpr int kEos = 0;
constexpr int kSep = 1;
constexpr int kUnk = 2;
constexpr int kDigitBase = 3;
constexpr int kLetterBase = 13;
constexpr int kOptionBase = 39;
constexpr int kTagBase = 45;
constexpr int kFillerBase = 57;
constexpr int kNumTags = 12;
constexpr int kNumFiller = 7;

inline int digit_token(int d) {
    if (d < 0 || d > 9) throw std::invalid_argument("digit_token: out of range");
    return kDigitBase + d;
}
inline int letter_token(int i) { // 0 = 'a'
    if (i < 0 || i > 25) throw std::invalid_argument("letter_token: out of range");
    return kLetterBase + i;
}
inline int option_token(int i) { // 0 = 'A'
    if (i < 0 || i > 5) throw std::invalid_argument("option_token: out of range");
    return kOptionBase + i;
}
inline int tag_token(int i) {
    if (i < 0 || i >= kNumTags)
        throw std::invalid_argument("tag_token: out of range");
    return kTagBase + i;
}

inline std::string token_name(int id) {
    if (id == kEos) return "<eos>";
    if (id == kSep) return "<sep>";
    if (id == kUnk) return "<unk>";
    if (id >= kDigitBase && id < kLetterBase)
        return std::string(1, char('0' + id - kDigitBase));
    if (id >= kLetterBase && id < kOptionBase)
        return std::string(1, char('a' + id - kLetterBase));
    if (id >= kOptionBase && id < kTagBase)
        return std::string(1, char('A' + id - kOptionBase));
    if (id >= kTagBase && id < kFillerBase)
        return "<t" + std::to_string(id - kTagBase) + ">";
    if (id >= kFillerBase && id < kVocabSize)
        return "<f" + std::to_string(id - kFillerBase) + ">";
    throw std::invalid_argument("token_name: id out of vocabulary");
}

// ---- task specification ----------------------------------------------------

enum class Rule {
    copy,        // letters -> same letters
    reverse,     // letters -> reversed letters
    pick_first,  // letters -> the first letter
    pick_middle, // letters -> the middle letter
    pick_last,   // letters -> the last letter
    opt_vowel,   // letters -> option A if the first letter is a vowel else B
    first_digit, // digits  -> the first digit
    mid_digit,   // digits  -> the middle digit
    last_digit,  // digits  -> the last digit
    rev_digits,  // digits  -> the digits reversed
    const_phrase,// digits  -> the fixed phrase "xyz" regardless of prompt
    const_jkl,   // letters -> the fixed phrase "jkl" regardless of prompt
    rep_first,   // digits  -> the first digit repeated three times
    sum_mod10,   // digits  -> (a+b+c) mod 10
    opt_max_pos, // digits  -> option A/B/C: position of the largest digit
    opt_min_pos, // digits  -> option A/B/C: position of the smallest digit
    opt_first_ge5,// digits -> option A if the first digit is >= 5 else B
    opt_mid_ge5, // digits  -> option A if the middle digit is >= 5 else B
    opt_last_ge5,// digits  -> option A if the last digit is >= 5 else B
    opt_sum_mod4,// digits  -> option A + (a+b+c) mod 4
    opt_alt_mod4 // digits  -> option A + (a+2b+3c) mod 4
};

enum class Format { single_token, phrase, option_letter };

inline Format format_for_rule(Rule r) {
    switch (r) {
        case Rule::copy:
        case Rule::reverse:
        case Rule::rev_digits:
        case Rule::const_phrase:
        case Rule::const_jkl:
        case Rule::rep_first: return Format::phrase;
        case Rule::pick_first:
        case Rule::pick_middle:
        case Rule::pick_last:
        case Rule::first_digit:
        case Rule::mid_digit:
        case Rule::last_digit:
        case Rule::sum_mod10: return Format::single_token;
        case Rule::opt_vowel:
        case Rule::opt_max_pos:
        case Rule::opt_min_pos:
        case Rule::opt_first_ge5:
        case Rule::opt_mid_ge5:
        case Rule::opt_last_ge5:
        case Rule::opt_sum_mod4:
        case Rule::opt_alt_mod4: return Format::option_letter;
    }
    throw std::invalid_argument("format_for_rule: unknown rule");
}

inline std::string rule_name(Rule r) {
    switch (r) {
        case Rule::copy: return "copy";
        case Rule::reverse: return "reverse";
        case Rule::pick_first: return "pick_first";
        case Rule::pick_middle: return "pick_middle";
        case Rule::pick_last: return "pick_last";
        case Rule::opt_vowel: return "opt_vowel";
        case Rule::first_digit: return "first_digit";
        case Rule::mid_digit: return "mid_digit";
        case Rule::last_digit: return "last_digit";
        case Rule::rev_digits: return "rev_digits";
        case Rule::const_phrase: return "const_phrase";
        case Rule::const_jkl: return "const_jkl";
        case Rule::rep_first: return "rep_first";
        case Rule::sum_mod10: return "sum_mod10";
        case Rule::opt_max_pos: return "opt_max_pos";
        case Rule::opt_min_pos: return "opt_min_pos";
        case Rule::opt_first_ge5: return "opt_first_ge5";
        case Rule::opt_mid_ge5: return "opt_mid_ge5";
        case Rule::opt_last_ge5: return "opt_last_ge5";
        case Rule::opt_sum_mod4: return "opt_sum_mod4";
        case Rule::opt_alt_mod4: return "opt_alt_mod4";
    }
    throw std::invalid_argument("rule_name: unknown rule");
}

inline int format_tag(Format f) {
    switch (f) {
        case Format::single_token: return tag_token(0);
        case Format::phrase: return tag_token(1);
        case Format::option_letter: return tag_token(2);
    }
    throw std::invalid_argument("format_tag: unknown format");
}

// keys are indices into the rule's keyspace: letters^3 or digits^3
constexpr std::size_t kLetterKeyspace = 26u * 26u * 26u;
constexpr std::size_t kDigitKeyspace = 1000u;

inline std::size_t keyspace_for_rule(Rule r) {
    switch (r) {
        case Rule::copy:
        case Rule::reverse:
        case Rule::pick_first:
        case Rule::pick_middle:
        case Rule::pick_last:
        case Rule::opt_vowel:
        case Rule::const_jkl: return kLetterKeyspace;
        default: return kDigitKeyspace;
    }
}

struct TaskSpec {
    int task_id = 0;
    Rule rule = Rule::copy;
    Format format = Format::phrase;
    std::size_t n_train = 300;
    std::size_t n_test = 60;
    std::uint64_t seed = 0;

    void validate() const {
        if (task_id < 0 || task_id >= kNumTags - 3)
            throw std::invalid_argument("TaskSpec: task_id out of tag range");
        if (format != format_for_rule(rule))
            throw std::invalid_argument(
                "TaskSpec: response format does not match the rule");
        if (n_train == 0 || n_test == 0)
            throw std::invalid_argument("TaskSpec: splits must be nonempty");
        if (n_train + n_test > keyspace_for_rule(rule))
            throw std::invalid_argument(
                "TaskSpec: n_train + n_test exceeds the keyspace");
    }

    // instruction prefix: response-format tag, then a per-task tag
    std::vector<int> instruction() const {
        return {format_tag(format), tag_token(3 + task_id)};
    }
};

struct Example {
    std::vector<int> instruction;
    std::vector<int> prompt;
    std::vector<int> response;

    bool operator==(const Example&) const = default;
};

struct TaskData {
    TaskSpec spec;
    std::vector<Example> train;
    std::vector<Example> test;
};

// ---- generation ------------------------------------------------------------

namespace detail {

inline std::vector<int> key_prompt(Rule rule, std::size_t key) {
    std::vector<int> out(3);
    if (keyspace_for_rule(rule) == kLetterKeyspace) {
        out[0] = letter_token(int(key / (26 * 26)) % 26);
        out[1] = letter_token(int(key / 26) % 26);
        out[2] = letter_token(int(key) % 26);
    } else {
        out[0] = digit_token(int(key / 100) % 10);
        out[1] = digit_token(int(key / 10) % 10);
        out[2] = digit_token(int(key) % 10);
    }
    return out;
}

inline std::vector<int> apply_rule(Rule rule, const std::vector<int>& prompt) {
    switch (rule) {
        case Rule::copy: return prompt;
        case Rule::reverse: {
            std::vector<int> r(prompt.rbegin(), prompt.rend());
            return r;
        }
        case Rule::pick_first: return {prompt[0]};
        case Rule::pick_middle: return {prompt[1]};
        case Rule::pick_last: return {prompt[2]};
        case Rule::rev_digits:
            return {prompt[2], prompt[1], prompt[0]};
        case Rule::const_phrase:
            return {letter_token(23), letter_token(24), letter_token(25)};
        case Rule::const_jkl:
            return {letter_token(9), letter_token(10), letter_token(11)};
        case Rule::rep_first:
            return {prompt[0], prompt[0], prompt[0]};
        case Rule::opt_vowel: {
            const int first = prompt[0] - kLetterBase;
            const bool vowel = first == 0 || first == 4 || first == 8 ||
                               first == 14 || first == 20; // a e i o u
            return {option_token(vowel ? 2 : 3)};
        }
        case Rule::first_digit: return {prompt[0]};
        case Rule::mid_digit: return {prompt[1]};
        case Rule::last_digit: return {prompt[2]};
        case Rule::sum_mod10: {
            int s = 0;
            for (int t : prompt) s += t - kDigitBase;
            return {digit_token(s % 10)};
        }
        case Rule::opt_max_pos: {
            int arg = 0;
            for (int i = 1; i < 3; ++i)
                if (prompt[i] > prompt[arg]) arg = i;
            return {option_token(arg)};
        }
        case Rule::opt_min_pos: {
            int arg = 0;
            for (int i = 1; i < 3; ++i)
                if (prompt[i] < prompt[arg]) arg = i;
            return {option_token(arg)};
        }
        case Rule::opt_first_ge5:
            return {option_token(prompt[0] - kDigitBase >= 5 ? 0 : 1)};
        case Rule::opt_mid_ge5:
            return {option_token(prompt[1] - kDigitBase >= 5 ? 0 : 1)};
        case Rule::opt_last_ge5:
            // answers from the C/D option pair so the two base option tasks
            // exercise disjoint answer tokens
            return {option_token(prompt[2] - kDigitBase >= 5 ? 2 : 3)};
        case Rule::opt_sum_mod4: {
            int s = 0;
            for (int t : prompt) s += t - kDigitBase;
            return {option_token(s % 4)};
        }
        case Rule::opt_alt_mod4: {
            int a = prompt[0] - kDigitBase, b = prompt[1] - kDigitBase,
                c = prompt[2] - kDigitBase;
            return {option_token((a + 2 * b + 3 * c) % 4)};
        }
    }
    throw std::invalid_argument("apply_rule: unknown rule");
}

} // namespace detail

// Deterministic disjoint train/test splits: a seeded permutation of the
// whole keyspace supplies distinct keys, the first n_train of which become
// the training split.
inline TaskData gen_task(const TaskSpec& spec) {
    spec.validate();
    const std::size_t space = keyspace_for_rule(spec.rule);
    std::vector<std::size_t> keys(space);
    for (std::size_t i = 0; i < space; ++i) keys[i] = i;
    Rng rng(mix_seed(spec.seed, 0x7a51u + std::uint64_t(spec.task_id)));
    rng.shuffle(keys);

    auto make = [&](std::size_t key) {
        Example e;
        e.instruction = spec.instruction();
        e.prompt = detail::key_prompt(spec.rule, key);
        e.response = detail::apply_rule(spec.rule, e.prompt);
        return e;
    };

    TaskData data;
    data.spec = spec;
    data.train.reserve(spec.n_train);
    data.test.reserve(spec.n_test);
    for (std::size_t i = 0; i < spec.n_train; ++i)
        data.train.push_back(make(keys[i]));
    for (std::size_t i = 0; i < spec.n_test; ++i)
        data.test.push_back(make(keys[spec.n_train + i]));
    return data;
}

// ---- mixtures ---------------------------------------------------------------

// Multitask mixture: proportions lambda_k = |D_k| / sum |D_j| realized by
// largest-remainder apportionment of `total`, then one seeded global
// shuffle.  With a single dataset this permutes that dataset's examples.
inline std::vector<Example> joint_mixture(
    const std::vector<std::vector<Example>>& datasets, std::size_t total,
    std::uint64_t seed) {
    if (datasets.empty())
        throw std::invalid_argument("joint_mixture: no datasets");
    if (total == 0)
        throw std::invalid_argument("joint_mixture: zero-size mixture");
    std::size_t grand = 0;
    for (const auto& d : datasets) {
        if (d.empty())
            throw std::invalid_argument("joint_mixture: empty dataset");
        grand += d.size();
    }

    // largest-remainder apportionment of `total` by lambda_k
    std::vector<std::size_t> counts(datasets.size());
    std::vector<std::pair<double, std::size_t>> rema;
    std::size_t assigned = 0;
    for (std::size_t k = 0; k < datasets.size(); ++k) {
        double exact = double(total) * double(datasets[k].size()) / double(grand);
        counts[k] = std::size_t(exact);
        assigned += counts[k];
        rema.push_back({exact - double(counts[k]), k});
    }
    std::stable_sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) {
        return a.first > b.first;
    });
    for (std::size_t i = 0; assigned < total; ++i, ++assigned)
        ++counts[rema[i % rema.size()].second];

    std::vector<Example> out;
    out.reserve(total);
    for (std::size_t k = 0; k < datasets.size(); ++k)
        for (std::size_t i = 0; i < counts[k]; ++i)
            out.push_back(datasets[k][i % datasets[k].size()]);

    std::vector<std::size_t> order(out.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(mix_seed(seed, 0x3013u));
    rng.shuffle(order);
    std::vector<Example> shuffled;
    shuffled.reserve(out.size());
    for (std::size_t i : order) shuffled.push_back(out[i]);
    return shuffled;
}

// Replay mixture: new-task examples plus buffer examples at the requested
// buffer fraction (to within one example), shuffled deterministically.
inline std::vector<Example> replay_mixture(const std::vector<Example>& new_task,
                                           const std::vector<Example>& buffer,
                                           double ratio, std::uint64_t seed) {
    if (buffer.empty())
        throw std::invalid_argument("replay_mixture: empty buffer");
    if (new_task.empty())
        throw std::invalid_argument("replay_mixture: empty new-task data");
    if (!(ratio > 0.0 && ratio < 1.0))
        throw std::invalid_argument("replay_mixture: ratio must be in (0,1)");
    // n_buf / (n_new + n_buf) == ratio  =>  n_buf = ratio/(1-ratio) * n_new
    std::size_t n_buf = std::size_t(
        ratio / (1.0 - ratio) * double(new_task.size()) + 0.5);
    std::vector<Example> out = new_task;
    for (std::size_t i = 0; i < n_buf; ++i)
        out.push_back(buffer[i % buffer.size()]);

    std::vector<std::size_t> order(out.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(mix_seed(seed, 0x8e91u));
    rng.shuffle(order);
    std::vector<Example> shuffled;
    shuffled.reserve(out.size());
    for (std::size_t i : order) shuffled.push_back(out[i]);
    return shuffled;
}

// ---- inquiry set and general probe ------------------------------------------

// Unlabeled prompts: three template-based draws across the given specs for
// every free-form draw, all deterministic under the seed.
inline std::vector<std::vector<int>> make_inquiry_prompts(
    const std::vector<TaskSpec>& specs, std::size_t size, std::uint64_t seed) {
    if (specs.empty())
        throw std::invalid_argument("inquiry: no task specs");
    if (size == 0) throw std::invalid_argument("inquiry: zero size");
    Rng rng(mix_seed(seed, 0x1eafu));
    std::vector<std::vector<int>> prompts;
    prompts.reserve(size);
    for (std::size_t i = 0; i < size; ++i) {
        if (i % 4 != 3) {
            const TaskSpec& spec = specs[rng.below(specs.size())];
            std::size_t key = rng.below(keyspace_for_rule(spec.rule));
            std::vector<int> p = spec.instruction();
            for (int t : detail::key_prompt(spec.rule, key)) p.push_back(t);
            p.push_back(kSep);
            prompts.push_back(std::move(p));
        } else {
            // free-form: filler-prefixed random letters/digits
            std::vector<int> p;
            p.push_back(kFillerBase + int(rng.below(kNumFiller)));
            std::size_t len = 2 + rng.below(4);
            for (std::size_t j = 0; j < len; ++j) {
                if (rng.below(2) == 0)
                    p.push_back(letter_token(int(rng.below(26))));
                else
                    p.push_back(digit_token(int(rng.below(10))));
            }
            p.push_back(kSep);
            prompts.push_back(std::move(p));
        }
    }
    return prompts;
}

// ---- batches and serialization ------------------------------------------------

// full sequence: instruction + prompt + <sep> + response + <eos>;
// input/target are the usual one-token shift and only response positions
// (including the closing <eos>) are supervised.
inline void append_example(nn::Batch& batch, const Example& e) {
    std::vector<int> full = e.instruction;
    full.insert(full.end(), e.prompt.begin(), e.prompt.end());
    full.push_back(kSep);
    const std::size_t response_start = full.size();
    full.insert(full.end(), e.response.begin(), e.response.end());
    full.push_back(kEos);

    std::vector<int> input(full.begin(), full.end() - 1);
    std::vector<int> target(full.begin() + 1, full.end());
    std::vector<std::uint8_t> mask(input.size(), 0);
    for (std::size_t t = 0; t < input.size(); ++t)
        mask[t] = (t + 1 >= response_start) ? 1 : 0;
    batch.inputs.push_back(std::move(input));
    batch.targets.push_back(std::move(target));
    batch.mask.push_back(std::move(mask));
}

inline nn::Batch to_training_batch(const std::vector<Example>& examples) {
    nn::Batch batch;
    for (const auto& e : examples) append_example(batch, e);
    return batch;
}

// decoding prompt (everything up to and including <sep>)
inline std::vector<int> decode_prompt(const Example& e) {
    std::vector<int> p = e.instruction;
    p.insert(p.end(), e.prompt.begin(), e.prompt.end());
    p.push_back(kSep);
    return p;
}

// one example per line: {"instruction":[...],"prompt":[...],"response":[...]}
inline void write_jsonl(std::ostream& os, const std::vector<Example>& examples) {
    for (const auto& e : examples) {
        nlohmann::json j;
        j["instruction"] = e.instruction;
        j["prompt"] = e.prompt;
        j["response"] = e.response;
        os << j.dump() << "\n";
    }
}

inline std::vector<Example> read_jsonl(std::istream& is) {
    std::vector<Example> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.contains("instruction") ||
            !j.contains("prompt") || !j.contains("response"))
            throw std::runtime_error("jsonl: malformed example at line " +
                                     std::to_string(line_no));
        Example e;
        e.instruction = j["instruction"].get<std::vector<int>>();
        e.prompt = j["prompt"].get<std::vector<int>>();
        e.response = j["response"].get<std::vector<int>>();
        for (const auto* vec : {&e.instruction, &e.prompt, &e.response})
            for (int id : *vec)
                if (id < 0 || id >= kVocabSize)
                    throw std::runtime_error("jsonl: token out of vocabulary at line " +
                                             std::to_string(line_no));
        out.push_back(std::move(e));
    }
    return out;
}

// ---- default stream ------------------------------------------------------------

// Base mixture tasks (the joint-trained starting point) and the streamed
// tasks that conflict with them.  The base pairs tasks within each prompt
// space and response format (pick_first/pick_middle, opt_first_ge5/
// opt_last_ge5, first_digit left alone) so the starting model must route
// behaviour by the task tag; every streamed task then re-labels a base
// prompt space with a new tag and a conflicting rule or response format:
// mid_digit answers digit prompts in first_digit's single-token format,
// opt_mid_ge5 re-labels the threshold tasks' digit prompts, and opt_vowel
// answers the letter prompts shared with copy and the pick tasks in option
// format, so sequential fine-tuning on the stream pulls the model away from
// the base behaviours it shares circuits with.
// Requested n_train is clamped to what the rule's keyspace can supply after
// reserving the test split, so one size fits letter and digit tasks alike.
namespace detail {
inline TaskSpec default_spec(int id, Rule r, std::uint64_t seed,
                             std::uint64_t salt, std::size_t n_train,
                             std::size_t n_test) {
    TaskSpec s;
    s.task_id = id;
    s.rule = r;
    s.format = format_for_rule(r);
    s.n_train = std::min(n_train, keyspace_for_rule(r) - n_test);
    s.n_test = n_test;
    s.seed = mix_seed(seed, salt + std::uint64_t(id));
    return s;
}
} // namespace detail

inline std::vector<TaskSpec> default_base_specs(std::uint64_t seed,
                                                std::size_t n_train = 300,
                                                std::size_t n_test = 60) {
    auto spec = [&](int id, Rule r) {
        return detail::default_spec(id, r, seed, 0xb5eu, n_train, n_test);
    };
    return {spec(0, Rule::copy),          spec(1, Rule::pick_first),
            spec(2, Rule::pick_middle),   spec(3, Rule::first_digit),
            spec(4, Rule::opt_first_ge5), spec(5, Rule::opt_last_ge5)};
}

inline std::vector<TaskSpec> default_stream_specs(std::uint64_t seed,
                                                  std::size_t n_train = 300,
                                                  std::size_t n_test = 60) {
    auto spec = [&](int id, Rule r) {
        return detail::default_spec(id, r, seed, 0x57eau, n_train, n_test);
    };
    return {spec(6, Rule::opt_mid_ge5), spec(7, Rule::opt_vowel),
            spec(8, Rule::const_phrase)};
}

} // namespace spcl::tasks
