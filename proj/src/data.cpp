#include "guide/data.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>

namespace guide::data {

namespace {

constexpr std::int64_t kTickSeconds = 300;
constexpr std::int64_t kGridTolerance = 60;
constexpr int kMaxFilledTicks = 2;  // gaps up to 15 min
constexpr std::size_t kLookbackTicks = kTicksPerDay;
constexpr std::size_t kExtendedTicks = kTicksPerDay;

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::optional<double> parse_number(const std::string& cell, const std::string& column, std::size_t line) {
  if (cell.empty() || cell == "NA" || cell == "nan") return std::nullopt;
  try {
    std::size_t used = 0;
    const double v = std::stod(cell, &used);
    if (used != cell.size() || !std::isfinite(v)) throw std::invalid_argument(cell);
    return v;
  } catch (const std::exception&) {
    throw SchemaError("line " + std::to_string(line) + ": column '" + column + "' is not numeric: '" + cell + "'");
  }
}

struct RawRow {
  std::int64_t time;
  std::optional<double> glucose;
  double carbs;
  double bolus;
  std::optional<double> basal;
  std::optional<int> sleep;
};

double clamp_glucose(double g) { return std::clamp(g, kMinGlucose, kMaxGlucose); }

template <class T>
nlohmann::json channel_json(const Channel<T>& c) {
  return nlohmann::json(std::vector<T>(c.begin(), c.end()));
}

template <class T>
void channel_from_json(const nlohmann::json& j, const char* name, Channel<T>& out) {
  const auto values = j.at(name).get<std::vector<T>>();
  if (values.size() != static_cast<std::size_t>(kWindowTicks))
    throw ValidationError(std::string("channel '") + name + "' must have 72 entries");
  std::copy(values.begin(), values.end(), out.begin());
}

nlohmann::json range_json(const TickRange& r) { return nlohmann::json::array({r.begin, r.end}); }
TickRange range_from_json(const nlohmann::json& j) {
  return {j.at(0).get<std::size_t>(), j.at(1).get<std::size_t>()};
}

}  // namespace

std::size_t SubjectRecord::filled_count() const {
  return static_cast<std::size_t>(std::count_if(ticks.begin(), ticks.end(), [](const RecordTick& t) { return t.filled; }));
}

std::size_t SubjectRecord::segment_count() const {
  return ticks.empty() ? 0 : static_cast<std::size_t>(ticks.back().segment) + 1;
}

int SubjectRecord::minute_of_day(std::size_t i) const {
  const std::int64_t s = ticks.at(i).time % 86400;
  return static_cast<int>((s < 0 ? s + 86400 : s) / 60);
}

int SubjectRecord::hour_of_day(std::size_t i) const { return minute_of_day(i) / 60; }

int default_sleep_flag(int hour) { return (hour >= 23 || hour < 7) ? 1 : 0; }

std::int64_t parse_timestamp(const std::string& text) {
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, s = 0;
  char sep = 0;
  int consumed = 0;
  const int fields = std::sscanf(text.c_str(), "%4d-%2d-%2d%c%2d:%2d%n", &y, &mo, &d, &sep, &h, &mi, &consumed);
  if (fields < 6 || (sep != 'T' && sep != ' ')) throw SchemaError("unparseable timestamp '" + text + "'");
  std::string rest = text.substr(static_cast<std::size_t>(consumed));
  if (!rest.empty() && rest[0] == ':') {
    int more = 0;
    if (std::sscanf(rest.c_str(), ":%2d%n", &s, &more) != 1) throw SchemaError("unparseable timestamp '" + text + "'");
    rest = rest.substr(static_cast<std::size_t>(more));
  }
  if (!rest.empty() && rest != "Z") throw SchemaError("unparseable timestamp '" + text + "'");
  using namespace std::chrono;
  const year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
  if (!ymd.ok() || h > 23 || mi > 59 || s > 59) throw SchemaError("invalid timestamp '" + text + "'");
  const auto days = sys_days{ymd}.time_since_epoch().count();
  return static_cast<std::int64_t>(days) * 86400 + h * 3600 + mi * 60 + s;
}

std::string format_timestamp(std::int64_t seconds) {
  using namespace std::chrono;
  const auto day_count = static_cast<int>(std::floor(static_cast<double>(seconds) / 86400.0));
  const year_month_day ymd{sys_days{days{day_count}}};
  const std::int64_t rem = seconds - static_cast<std::int64_t>(day_count) * 86400;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02d:%02d:%02d", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()), static_cast<int>(rem / 3600),
                static_cast<int>(rem % 3600 / 60), static_cast<int>(rem % 60));
  return buf;
}

SubjectRecord parse_csv(std::istream& in, const std::string& subject_id, const CsvSchema& schema,
                        const IngestOptions& options) {
  std::string line;
  if (!std::getline(in, line) || trim(line).empty()) throw SchemaError("empty file: no header row");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const std::vector<std::string> header = split_line(line);
  const auto column = [&](const std::string& name) -> std::optional<std::size_t> {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) return std::nullopt;
    return static_cast<std::size_t>(it - header.begin());
  };
  const auto required = [&](const std::string& name) {
    const auto idx = column(name);
    if (!idx) throw SchemaError("missing required column \"" + name + "\"");
    return *idx;
  };
  const std::size_t c_time = required(schema.timestamp);
  const std::size_t c_glucose = required(schema.glucose);
  const std::size_t c_carbs = required(schema.carbs);
  const std::size_t c_bolus = required(schema.bolus);
  const auto c_basal = column(schema.basal);
  const auto c_sleep = column(schema.sleep);

  std::vector<RawRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    const std::vector<std::string> cells = split_line(line);
    if (cells.size() < header.size())
      throw SchemaError("line " + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                        " columns, got " + std::to_string(cells.size()));
    RawRow row{};
    try {
      row.time = parse_timestamp(cells[c_time]);
    } catch (const SchemaError& e) {
      throw SchemaError("line " + std::to_string(line_no) + ": " + e.what());
    }
    row.glucose = parse_number(cells[c_glucose], schema.glucose, line_no);
    row.carbs = parse_number(cells[c_carbs], schema.carbs, line_no).value_or(0.0);
    row.bolus = parse_number(cells[c_bolus], schema.bolus, line_no).value_or(0.0);
    if (row.carbs < 0.0 || row.bolus < 0.0)
      throw SchemaError("line " + std::to_string(line_no) + ": negative carbs or bolus");
    if (c_basal) row.basal = parse_number(cells[*c_basal], schema.basal, line_no);
    if (c_sleep) {
      if (const auto z = parse_number(cells[*c_sleep], schema.sleep, line_no)) row.sleep = *z > 0.5 ? 1 : 0;
    }
    rows.push_back(row);
  }
  if (rows.empty()) throw SchemaError("empty file: no data rows");

  std::stable_sort(rows.begin(), rows.end(), [](const RawRow& a, const RawRow& b) { return a.time < b.time; });
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].time == rows[i - 1].time)
      throw SchemaError("duplicate timestamp " + format_timestamp(rows[i].time));
  }
  // Leading rows without a glucose reading cannot be filled.
  const auto first_valid = std::find_if(rows.begin(), rows.end(), [](const RawRow& r) { return r.glucose.has_value(); });
  if (first_valid == rows.end()) throw SchemaError("no glucose readings in file");
  rows.erase(rows.begin(), first_valid);

  SubjectRecord record;
  record.subject_id = subject_id;
  record.sleep_synthesized = !c_sleep;
  int segment = 0;
  double last_glucose = clamp_glucose(*rows.front().glucose);
  double last_basal = rows.front().basal.value_or(0.0);
  const auto sleep_for = [&](const RawRow& r, std::int64_t t) {
    if (r.sleep) return *r.sleep;
    const std::int64_t s = ((t % 86400) + 86400) % 86400;
    return default_sleep_flag(static_cast<int>(s / 3600));
  };
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const RawRow& r = rows[i];
    if (i > 0) {
      const std::int64_t delta = r.time - rows[i - 1].time;
      const std::int64_t steps = (delta + kTickSeconds / 2) / kTickSeconds;
      if (steps < 1 || std::llabs(delta - steps * kTickSeconds) > kGridTolerance)
        throw SchemaError("timestamp " + format_timestamp(r.time) + " is off the 5-minute grid");
      if (steps - 1 > kMaxFilledTicks) {
        if (options.strict)
          throw SchemaError("gap of " + std::to_string(delta / 60) + " min before " + format_timestamp(r.time) +
                            " exceeds 15 min (strict mode)");
        ++segment;
      } else {
        for (std::int64_t k = 1; k < steps; ++k) {
          const std::int64_t t = rows[i - 1].time + k * kTickSeconds;
          RecordTick fill{t, last_glucose, 0.0, 0.0, last_basal, 0, true, segment};
          fill.sleep = record.ticks.back().sleep;
          if (record.sleep_synthesized) fill.sleep = sleep_for(RawRow{}, t);
          record.ticks.push_back(fill);
        }
      }
    }
    RecordTick tick;
    tick.time = r.time;
    tick.filled = !r.glucose.has_value();
    if (r.glucose) last_glucose = clamp_glucose(*r.glucose);
    tick.glucose = last_glucose;
    tick.carbs = r.carbs;
    tick.bolus = r.bolus;
    if (r.basal) last_basal = *r.basal;
    tick.basal = last_basal;
    tick.sleep = sleep_for(r, r.time);
    tick.segment = segment;
    record.ticks.push_back(tick);
  }
  return record;
}

SubjectRecord ingest_csv(const std::filesystem::path& path, const CsvSchema& schema, const IngestOptions& options) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open " + path.string());
  try {
    return parse_csv(in, path.stem().string(), schema, options);
  } catch (const SchemaError& e) {
    throw SchemaError(path.string() + ": " + e.what());
  }
}

void write_csv(const SubjectRecord& record, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "timestamp,glucose,carbs,bolus,basal,sleep\n";
  char buf[160];
  for (const RecordTick& t : record.ticks) {
    std::snprintf(buf, sizeof buf, "%s,%.2f,%.1f,%.2f,%.3f,%d\n", format_timestamp(t.time).c_str(), t.glucose, t.carbs,
                  t.bolus, t.basal, t.sleep);
    out << buf;
  }
}

SplitPlan make_split(std::size_t n) {
  const std::size_t min_ticks = 5 * kWindowTicks;  // 360
  if (n <= min_ticks)
    throw ValidationError("record of " + std::to_string(n) + " ticks is too short to split (needs more than " +
                          std::to_string(min_ticks) + ")");
  SplitPlan plan;
  const std::size_t predictor_end = n * 4 / 5;
  const std::size_t pool = n - predictor_end;
  const std::size_t rl_train_end = predictor_end + pool * 4 / 5;
  plan.predictor_train = {0, predictor_end};
  plan.rl_pool = {predictor_end, n};
  plan.rl_train = {predictor_end, rl_train_end};
  plan.rl_eval = {rl_train_end, n};
  return plan;
}

SplitPlan make_split(const SubjectRecord& record) { return make_split(record.size()); }

StateWindow window_ending_at(const SubjectRecord& record, std::size_t last) {
  if (last + 1 < static_cast<std::size_t>(kWindowTicks) || last >= record.size())
    throw ValidationError("window ending at tick " + std::to_string(last) + " is outside the record");
  const std::size_t first = last + 1 - kWindowTicks;
  const int segment = record.ticks[last].segment;

  const auto elapsed_at = [&](std::size_t i, bool meal) {
    for (std::size_t back = 0; back <= kLookbackTicks && back <= i; ++back) {
      const RecordTick& t = record.ticks[i - back];
      if (t.segment != segment) break;
      if ((meal ? t.carbs : t.bolus) > 0.0) return std::min(kMaxElapsedMinutes, 5.0 * static_cast<double>(back));
    }
    return kMaxElapsedMinutes;
  };

  StateWindow w;
  for (int k = 0; k < kWindowTicks; ++k) {
    const std::size_t i = first + static_cast<std::size_t>(k);
    const RecordTick& t = record.ticks[i];
    w.hour_of_day[k] = record.hour_of_day(i);
    w.sleep[k] = t.sleep;
    w.glucose[k] = clamp_glucose(t.glucose);
    w.carbs[k] = t.carbs;
    w.bolus[k] = t.bolus;
    if (k == 0) {
      w.minutes_since_meal[k] = elapsed_at(i, true);
      w.minutes_since_inject[k] = elapsed_at(i, false);
    } else {
      w.minutes_since_meal[k] = advance_elapsed(w.minutes_since_meal[k - 1], t.carbs > 0.0);
      w.minutes_since_inject[k] = advance_elapsed(w.minutes_since_inject[k - 1], t.bolus > 0.0);
    }
  }
  return w;
}

std::vector<InitialState> build_initial_states(const SubjectRecord& record, TickRange range, std::size_t count) {
  if (range.end > record.size() || range.begin > range.end)
    throw ValidationError("tick range exceeds the record");
  if (range.size() < static_cast<std::size_t>(kWindowTicks))
    throw ValidationError("range of " + std::to_string(range.size()) + " ticks is shorter than one 72-tick window");
  std::vector<InitialState> states;
  for (std::size_t start = range.begin; start + kWindowTicks <= range.end && states.size() < count;
       start += kTicksPerHour) {
    const std::size_t last = start + kWindowTicks - 1;
    if (record.ticks[start].segment != record.ticks[last].segment) continue;
    InitialState s;
    s.subject_id = record.subject_id;
    s.window = window_ending_at(record, last);
    s.origin_tick = Tick{static_cast<std::int64_t>(last)};
    std::size_t ext_first = last + 1 >= kExtendedTicks ? last + 1 - kExtendedTicks : 0;
    while (record.ticks[ext_first].segment != record.ticks[last].segment) ++ext_first;
    for (std::size_t i = ext_first; i <= last; ++i) s.extended_glucose.push_back(clamp_glucose(record.ticks[i].glucose));
    states.push_back(std::move(s));
  }
  return states;
}

double trailing_mean(const std::vector<double>& values, std::size_t i, std::size_t window) {
  if (i >= values.size()) throw ValidationError("trailing_mean index out of range");
  const std::size_t first = i + 1 >= window ? i + 1 - window : 0;
  double sum = 0.0;
  for (std::size_t k = first; k <= i; ++k) sum += values[k];
  return sum / static_cast<double>(i + 1 - first);
}

nlohmann::json to_json(const StateWindow& w) {
  return {{"hour_of_day", channel_json(w.hour_of_day)},
          {"sleep", channel_json(w.sleep)},
          {"glucose", channel_json(w.glucose)},
          {"carbs", channel_json(w.carbs)},
          {"bolus", channel_json(w.bolus)},
          {"minutes_since_meal", channel_json(w.minutes_since_meal)},
          {"minutes_since_inject", channel_json(w.minutes_since_inject)}};
}

StateWindow window_from_json(const nlohmann::json& j) {
  StateWindow w;
  channel_from_json(j, "hour_of_day", w.hour_of_day);
  channel_from_json(j, "sleep", w.sleep);
  channel_from_json(j, "glucose", w.glucose);
  channel_from_json(j, "carbs", w.carbs);
  channel_from_json(j, "bolus", w.bolus);
  channel_from_json(j, "minutes_since_meal", w.minutes_since_meal);
  channel_from_json(j, "minutes_since_inject", w.minutes_since_inject);
  validate(w);
  return w;
}

nlohmann::json to_json(const SplitPlan& plan) {
  return {{"schema_version", 1},
          {"predictor_train", range_json(plan.predictor_train)},
          {"rl_pool", range_json(plan.rl_pool)},
          {"rl_train", range_json(plan.rl_train)},
          {"rl_eval", range_json(plan.rl_eval)}};
}

SplitPlan split_from_json(const nlohmann::json& j) {
  return {range_from_json(j.at("predictor_train")), range_from_json(j.at("rl_pool")),
          range_from_json(j.at("rl_train")), range_from_json(j.at("rl_eval"))};
}

nlohmann::json to_json(const InitialState& s) {
  return {{"subject_id", s.subject_id},
          {"origin_tick", s.origin_tick.index},
          {"window", to_json(s.window)},
          {"extended_glucose", s.extended_glucose}};
}

InitialState initial_state_from_json(const nlohmann::json& j) {
  InitialState s;
  s.subject_id = j.at("subject_id").get<std::string>();
  s.origin_tick = Tick{j.at("origin_tick").get<std::int64_t>()};
  s.window = window_from_json(j.at("window"));
  s.extended_glucose = j.at("extended_glucose").get<std::vector<double>>();
  if (s.extended_glucose.size() < static_cast<std::size_t>(kWindowTicks) ||
      !std::equal(s.window.glucose.begin(), s.window.glucose.end(), s.extended_glucose.end() - kWindowTicks))
    throw ValidationError("extended_glucose must end with the window's glucose channel");
  return s;
}

nlohmann::json to_json(const SubjectRecord& r) {
  nlohmann::json time = nlohmann::json::array(), glucose = nlohmann::json::array(), carbs = nlohmann::json::array(),
                 bolus = nlohmann::json::array(), basal = nlohmann::json::array(), sleep = nlohmann::json::array(),
                 filled = nlohmann::json::array(), segment = nlohmann::json::array();
  for (const RecordTick& t : r.ticks) {
    time.push_back(t.time);
    glucose.push_back(t.glucose);
    carbs.push_back(t.carbs);
    bolus.push_back(t.bolus);
    basal.push_back(t.basal);
    sleep.push_back(t.sleep);
    filled.push_back(t.filled ? 1 : 0);
    segment.push_back(t.segment);
  }
  return {{"schema_version", 1}, {"subject_id", r.subject_id}, {"sleep_synthesized", r.sleep_synthesized},
          {"time", time},        {"glucose", glucose},         {"carbs", carbs},
          {"bolus", bolus},      {"basal", basal},             {"sleep", sleep},
          {"filled", filled},    {"segment", segment}};
}

SubjectRecord record_from_json(const nlohmann::json& j) {
  SubjectRecord r;
  r.subject_id = j.at("subject_id").get<std::string>();
  r.sleep_synthesized = j.value("sleep_synthesized", false);
  const auto time = j.at("time").get<std::vector<std::int64_t>>();
  const auto glucose = j.at("glucose").get<std::vector<double>>();
  const auto carbs = j.at("carbs").get<std::vector<double>>();
  const auto bolus = j.at("bolus").get<std::vector<double>>();
  const auto basal = j.at("basal").get<std::vector<double>>();
  const auto sleep = j.at("sleep").get<std::vector<int>>();
  const auto filled = j.at("filled").get<std::vector<int>>();
  const auto segment = j.at("segment").get<std::vector<int>>();
  const std::size_t n = time.size();
  if (glucose.size() != n || carbs.size() != n || bolus.size() != n || basal.size() != n || sleep.size() != n ||
      filled.size() != n || segment.size() != n)
    throw ValidationError("record channels differ in length");
  r.ticks.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    r.ticks[i] = {time[i], glucose[i], carbs[i], bolus[i], basal[i], sleep[i], filled[i] != 0, segment[i]};
  return r;
}

}  // namespace guide::data
