#include "altogether/annosvc.hpp"

#include <algorithm>
#include <set>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "altogether/error.hpp"
#include "altogether/textproc.hpp"

namespace altogether::annosvc {

using Clock = std::chrono::steady_clock;

namespace {

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
}

std::string assignment_id(const std::string& project_id, int round_no, std::size_t pos) {
  return fmt::format("{}-r{}-{}", project_id, round_no, pos);
}

}  // namespace

struct Service::ProjectState {
  Project info;
  corpus::Corpus corpus;
  std::vector<std::vector<Assignment>> rounds;  // rounds[r - 2] holds round r
  std::map<std::string, std::pair<std::string, Clock::time_point>> leases;  // assignment -> (annotator, expiry)
  std::optional<corpus::EmbeddingMatrix> images;
  std::optional<corpus::TextEmbedder> embedder;

  std::vector<Assignment>& round(int r) { return rounds[static_cast<std::size_t>(r - 2)]; }
  const std::vector<Assignment>& round(int r) const { return rounds[static_cast<std::size_t>(r - 2)]; }

  bool complete(int r) const {
    if (r == 1) return true;
    const auto& as = round(r);
    return std::all_of(as.begin(), as.end(), [](const Assignment& a) { return a.submitted; });
  }
};

std::string vendor_of(std::string_view annotator) {
  return std::string(annotator.substr(0, annotator.find('/')));
}

std::size_t vendor_index(std::size_t item_position, int round_no, std::size_t n_vendors) {
  if (n_vendors == 0) throw Error(ErrorKind::kValidation, "no vendors");
  if (round_no < 2) throw Error(ErrorKind::kRange, fmt::format("round {} has no vendor assignments", round_no));
  return (item_position + static_cast<std::size_t>(round_no - 2)) % n_vendors;
}

Service::Service(ServiceOptions opts) : opts_(std::move(opts)) {
  if (!opts_.log_path) return;
  if (std::filesystem::exists(*opts_.log_path)) {
    io::for_each_jsonl(*opts_.log_path, [&](std::size_t line, const io::Json& ev) {
      try {
        const auto type = io::require_string(ev, "type");
        if (type == "project_created") {
          apply_create(ev);
        } else if (type == "round_opened") {
          apply_open(ev);
        } else if (type == "submitted") {
          apply_submit(ev);
        } else {
          throw Error(ErrorKind::kParse, fmt::format("unknown event type '{}'", type));
        }
      } catch (const Error& e) {
        throw Error(e.kind(), fmt::format("{}:{}: replay failed: {}", opts_.log_path->string(), line, e.what()));
      }
    });
  }
  log_.open(*opts_.log_path, std::ios::app);
  if (!log_) throw Error(ErrorKind::kIo, fmt::format("cannot open event log '{}'", opts_.log_path->string()));
}

Service::~Service() = default;

void Service::append(const io::Json& event) {
  if (!log_.is_open()) return;
  log_ << event.dump() << '\n';
  log_.flush();
  if (!log_) throw Error(ErrorKind::kIo, fmt::format("failed appending to event log '{}'", opts_.log_path->string()));
}

Service::ProjectState& Service::state(const std::string& project_id) {
  auto it = by_id_.find(project_id);
  if (it == by_id_.end()) throw Error(ErrorKind::kNotFound, fmt::format("unknown project '{}'", project_id));
  return *projects_[it->second];
}

const Service::ProjectState& Service::state(const std::string& project_id) const {
  return const_cast<Service*>(this)->state(project_id);
}

// --- projects ------------------------------------------------------------------

Project Service::create_project(const std::string& name, std::vector<corpus::ImageItem> items,
                                const std::vector<std::string>& vendors) {
  if (name.empty()) throw Error(ErrorKind::kValidation, "project name must be non-empty");
  if (items.empty()) throw Error(ErrorKind::kValidation, fmt::format("project '{}' has no items", name));
  if (vendors.empty()) throw Error(ErrorKind::kValidation, "at least one vendor is required");
  std::set<std::string> seen;
  for (const auto& v : vendors) {
    if (v.empty() || v.find('/') != std::string::npos) {
      throw Error(ErrorKind::kValidation, fmt::format("invalid vendor name '{}'", v));
    }
    if (!seen.insert(v).second) throw Error(ErrorKind::kValidation, fmt::format("vendor '{}' listed twice", v));
  }
  // Surfaces duplicate ids before anything is logged.
  (void)corpus::Corpus::from_items(items, {.auto_round_one = false});

  std::unique_lock lock(mu_);
  if (by_name_.contains(name)) throw Error(ErrorKind::kConflict, fmt::format("project '{}' already exists", name));
  io::Json jitems = io::Json::array();
  for (const auto& it : items) jitems.push_back(corpus::item_to_json(it));
  const io::Json ev{{"type", "project_created"},
                    {"id", fmt::format("p{}", projects_.size() + 1)},
                    {"name", name},
                    {"vendors", vendors},
                    {"items", std::move(jitems)},
                    {"ts", now_seconds()}};
  append(ev);
  return apply_create(ev);
}

Project Service::create_project(const std::string& name, const std::filesystem::path& items_file,
                                const std::vector<std::string>& vendors) {
  auto c = corpus::ingest_pairs(items_file, {.auto_round_one = false});
  return create_project(name, c.items(), vendors);
}

Project Service::apply_create(const io::Json& ev) {
  auto st = std::make_unique<ProjectState>();
  st->info.id = io::require_string(ev, "id");
  st->info.name = io::require_string(ev, "name");
  st->info.vendors = ev.at("vendors").get<std::vector<std::string>>();
  std::vector<corpus::ImageItem> items;
  for (const auto& j : ev.at("items")) {
    items.push_back(corpus::item_from_json(j));
    st->info.item_ids.push_back(items.back().id);
  }
  st->corpus = corpus::Corpus::from_items(std::move(items));
  st->info.current_round = 1;
  const auto idx = projects_.size();
  by_id_.emplace(st->info.id, idx);
  by_name_.emplace(st->info.name, idx);
  projects_.push_back(std::move(st));
  return projects_.back()->info;
}

Project Service::project(const std::string& project_id) const {
  std::shared_lock lock(mu_);
  return state(project_id).info;
}

std::vector<Project> Service::projects() const {
  std::shared_lock lock(mu_);
  std::vector<Project> out;
  for (const auto& p : projects_) out.push_back(p->info);
  return out;
}

// --- rounds --------------------------------------------------------------------

std::vector<Assignment> Service::open_round(const std::string& project_id, int round_no) {
  std::unique_lock lock(mu_);
  auto& st = state(project_id);
  const int current = st.info.current_round;
  if (round_no != current + 1) {
    throw Error(ErrorKind::kSequencing,
                fmt::format("project '{}' is at round {}; the next round to open is {}, not {}", project_id, current,
                            current + 1, round_no));
  }
  if (!st.complete(current)) {
    std::vector<std::string> pending;
    for (const auto& a : st.round(current)) {
      if (!a.submitted) pending.push_back(a.item_id);
    }
    throw Error(ErrorKind::kPrecondition,
                fmt::format("round {} still has {} unsubmitted item(s): {}", current, pending.size(),
                            fmt::join(pending, ", ")));
  }
  const io::Json ev{{"type", "round_opened"}, {"project", project_id}, {"round", round_no}, {"ts", now_seconds()}};
  append(ev);
  return apply_open(ev);
}

std::vector<Assignment> Service::apply_open(const io::Json& ev) {
  auto& st = state(io::require_string(ev, "project"));
  const int r = static_cast<int>(io::require_int(ev, "round"));
  if (r != st.info.current_round + 1) {
    throw Error(ErrorKind::kSequencing, fmt::format("round {} opened out of order", r));
  }
  std::vector<Assignment> out;
  for (std::size_t pos = 0; pos < st.info.item_ids.size(); ++pos) {
    Assignment a;
    a.id = assignment_id(st.info.id, r, pos);
    a.project_id = st.info.id;
    a.round_no = r;
    a.item_id = st.info.item_ids[pos];
    a.vendor = st.info.vendors[vendor_index(pos, r, st.info.vendors.size())];
    assignment_index_[a.id] = {by_id_.at(st.info.id), static_cast<std::size_t>(r), pos};
    out.push_back(std::move(a));
  }
  st.rounds.push_back(out);
  st.info.current_round = r;
  return out;
}

std::vector<Assignment> Service::assignments(const std::string& project_id, int round_no) const {
  std::shared_lock lock(mu_);
  const auto& st = state(project_id);
  if (round_no < 2 || round_no > st.info.current_round) {
    throw Error(ErrorKind::kNotFound, fmt::format("project '{}' has no round {} assignments", project_id, round_no));
  }
  return st.round(round_no);
}

std::vector<corpus::RoundRecord> Service::rounds(const std::string& project_id, const std::string& item_id) const {
  std::shared_lock lock(mu_);
  return state(project_id).corpus.rounds(item_id);
}

// --- tasks ---------------------------------------------------------------------

std::optional<TaskView> Service::next_task(const std::string& project_id, const std::string& annotator) {
  if (annotator.empty()) throw Error(ErrorKind::kValidation, "annotator must be non-empty");
  std::shared_lock lock(mu_);
  auto& st = state(project_id);
  const int r = st.info.current_round;
  if (r < 2) return std::nullopt;
  const auto vendor = vendor_of(annotator);

  std::lock_guard lease_lock(lease_mu_);
  const auto now = Clock::now();
  const Assignment* pick = nullptr;
  for (const auto& a : st.round(r)) {
    if (a.submitted || a.vendor != vendor) continue;
    auto l = st.leases.find(a.id);
    if (l != st.leases.end() && l->second.first == annotator && l->second.second > now) {
      pick = &a;
      break;
    }
  }
  if (!pick) {
    for (const auto& a : st.round(r)) {
      if (a.submitted || a.vendor != vendor) continue;
      auto l = st.leases.find(a.id);
      if (l == st.leases.end() || l->second.second <= now) {
        pick = &a;
        break;
      }
    }
  }
  if (!pick) return std::nullopt;
  st.leases[pick->id] = {annotator, now + opts_.lease};

  const auto& item = st.corpus.item(pick->item_id);
  TaskView t;
  t.assignment = *pick;
  t.image_ref = item.image_ref;
  t.alt_text = item.alt_text;
  t.previous_caption = st.corpus.round(pick->item_id, r - 1)->caption;
  return t;
}

corpus::RoundRecord Service::submit(const std::string& assignment_id, const Submission& sub) {
  std::unique_lock lock(mu_);
  auto ref = assignment_index_.find(assignment_id);
  if (ref == assignment_index_.end()) {
    throw Error(ErrorKind::kNotFound, fmt::format("unknown assignment '{}'", assignment_id));
  }
  auto& st = *projects_[ref->second[0]];
  const auto& a = st.round(static_cast<int>(ref->second[1]))[ref->second[2]];
  if (a.submitted) throw Error(ErrorKind::kState, fmt::format("assignment '{}' was already submitted", assignment_id));
  if (sub.annotator.empty()) throw Error(ErrorKind::kValidation, "annotator must be non-empty");
  if (vendor_of(sub.annotator) != a.vendor) {
    throw Error(ErrorKind::kConflict, fmt::format("assignment '{}' belongs to vendor '{}', not '{}'", assignment_id,
                                                  a.vendor, vendor_of(sub.annotator)));
  }
  {
    std::lock_guard lease_lock(lease_mu_);
    auto l = st.leases.find(a.id);
    if (l != st.leases.end() && l->second.first != sub.annotator && l->second.second > Clock::now()) {
      throw Error(ErrorKind::kConflict,
                  fmt::format("assignment '{}' is leased to '{}'", assignment_id, l->second.first));
    }
  }

  std::vector<std::string> violations;
  for (auto key : kChecklistKeys) {
    auto it = sub.checklist.find(std::string(key));
    if (it == sub.checklist.end() || !it->second) violations.push_back(fmt::format("checklist:{}", key));
  }
  for (const auto& [key, _] : sub.checklist) {
    if (std::find(kChecklistKeys.begin(), kChecklistKeys.end(), key) == kChecklistKeys.end()) {
      violations.push_back(fmt::format("checklist-unknown:{}", key));
    }
  }
  if (!textproc::starting_prompt_check(sub.caption).accepted) violations.push_back("starting-prompt");
  if (!violations.empty()) {
    std::string detail = fmt::format("submission rejected: {}", fmt::join(violations, ", "));
    if (violations.back() == "starting-prompt") {
      detail += "; captions must begin with a recommended starting prompt such as \"a photo of\"";
    }
    throw SubmissionRejected(detail, std::move(violations));
  }

  io::Json checklist = io::Json::object();
  for (const auto& [k, v] : sub.checklist) checklist[k] = v;
  const io::Json ev{{"type", "submitted"},   {"assignment", assignment_id}, {"caption", sub.caption},
                    {"annotator", sub.annotator}, {"checklist", std::move(checklist)}, {"ts", now_seconds()}};
  append(ev);
  return apply_submit(ev);
}

corpus::RoundRecord Service::apply_submit(const io::Json& ev) {
  const auto id = io::require_string(ev, "assignment");
  auto ref = assignment_index_.find(id);
  if (ref == assignment_index_.end()) throw Error(ErrorKind::kNotFound, fmt::format("unknown assignment '{}'", id));
  auto& st = *projects_[ref->second[0]];
  auto& a = st.round(static_cast<int>(ref->second[1]))[ref->second[2]];
  if (a.submitted) throw Error(ErrorKind::kState, fmt::format("assignment '{}' was already submitted", id));
  auto rec = st.corpus.record_round(a.item_id, a.round_no, io::require_string(ev, "caption"),
                                    io::require_string(ev, "annotator"), ev.at("ts").get<double>());
  a.submitted = true;
  std::lock_guard lease_lock(lease_mu_);
  st.leases.erase(id);
  return rec;
}

// --- stats ---------------------------------------------------------------------

std::vector<corpus::RoundStats> Service::stats(const std::string& project_id) const {
  std::shared_lock lock(mu_);
  const auto& st = state(project_id);
  std::vector<corpus::RoundStats> out;
  for (int r = 1; r <= st.info.current_round; ++r) {
    if (!st.complete(r)) break;
    out.push_back(corpus::round_stats(st.corpus, r, st.images ? &*st.images : nullptr,
                                      st.embedder ? &*st.embedder : nullptr));
  }
  return out;
}

void Service::register_embeddings(const std::string& project_id, corpus::EmbeddingMatrix images,
                                  corpus::TextEmbedder text_embedder) {
  std::unique_lock lock(mu_);
  auto& st = state(project_id);
  st.images = std::move(images);
  st.embedder = std::move(text_embedder);
}

// --- JSON ----------------------------------------------------------------------

io::Json to_json(const Project& p) {
  return {{"id", p.id}, {"name", p.name}, {"item_ids", p.item_ids}, {"vendors", p.vendors},
          {"current_round", p.current_round}};
}

io::Json to_json(const Assignment& a) {
  return {{"id", a.id},         {"project_id", a.project_id}, {"round_no", a.round_no},
          {"item_id", a.item_id}, {"vendor", a.vendor},         {"state", a.submitted ? "submitted" : "open"}};
}

io::Json to_json(const TaskView& t) {
  io::Json prompts = io::Json::array();
  for (auto p : textproc::recommended_prompts()) prompts.push_back(p);
  io::Json checklist = io::Json::array();
  for (auto k : kChecklistKeys) checklist.push_back(k);
  return {{"assignment_id", t.assignment.id},
          {"project_id", t.assignment.project_id},
          {"item_id", t.assignment.item_id},
          {"round_no", t.assignment.round_no},
          {"vendor", t.assignment.vendor},
          {"image_ref", t.image_ref},
          {"alt_text", t.alt_text},
          {"previous_caption", t.previous_caption},
          {"checklist", std::move(checklist)},
          {"starting_prompts", std::move(prompts)}};
}

io::Json to_json(const corpus::RoundRecord& r) {
  return {{"item_id", r.item_id},
          {"round_no", r.round_no},
          {"caption", r.caption},
          {"annotator", r.annotator},
          {"timestamp", r.timestamp},
          {"edit_distance_to_prev", r.edit_distance_to_prev},
          {"length_words", r.length_words}};
}

io::Json to_json(const corpus::RoundStats& s) {
  io::Json j{{"round_no", s.round_no},
             {"item_count", s.item_count},
             {"mean_length_words", s.mean_length_words},
             {"mean_edit_distance", s.mean_edit_distance}};
  if (s.mean_alignment) j["mean_alignment"] = *s.mean_alignment;
  return j;
}

}  // namespace altogether::annosvc
