#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <sstream>

#include "guide/data.hpp"
#include "support.hpp"

using namespace guide;
using namespace guide::data;

namespace {

SubjectRecord parse(const std::string& text, IngestOptions options = {}) {
  std::istringstream in(text);
  return parse_csv(in, "T1", {}, options);
}

}  // namespace

TEST_CASE("well-formed day gives 288 ticks") {
  const SubjectRecord r = parse(testsupport::csv_rows(288));
  CHECK(r.size() == 288);
  CHECK(r.filled_count() == 0);
  CHECK(r.segment_count() == 1);
  CHECK_FALSE(r.sleep_synthesized);
  CHECK(r.hour_of_day(12) == 1);
  CHECK(r.minute_of_day(13) == 65);
}

TEST_CASE("a 10-minute gap is forward-filled with one flagged tick") {
  // 287 rows with one missing row after index 100
  const SubjectRecord r = parse(testsupport::csv_rows(287, 100, 1));
  CHECK(r.size() == 288);
  CHECK(r.filled_count() == 1);
  CHECK(r.ticks[101].filled);
  CHECK(r.ticks[101].glucose == r.ticks[100].glucose);
  CHECK(r.ticks[101].carbs == 0.0);
  CHECK(r.segment_count() == 1);
  for (std::size_t i = 1; i < r.size(); ++i) CHECK(r.ticks[i].time - r.ticks[i - 1].time == 300);
}

TEST_CASE("gaps longer than 15 minutes split segments, or fail in strict mode") {
  const std::string text = testsupport::csv_rows(300, 150, 6);  // 35 min gap
  const SubjectRecord r = parse(text);
  CHECK(r.size() == 300);
  CHECK(r.segment_count() == 2);
  CHECK(r.ticks[150].segment == 0);
  CHECK(r.ticks[151].segment == 1);
  IngestOptions strict;
  strict.strict = true;
  CHECK_THROWS_WITH_AS(parse(text, strict), doctest::Contains("strict"), SchemaError);

  // exactly 15 min gap (2 missing ticks) is still filled
  const SubjectRecord filled = parse(testsupport::csv_rows(300, 150, 2));
  CHECK(filled.segment_count() == 1);
  CHECK(filled.filled_count() == 2);
}

TEST_CASE("schema errors") {
  CHECK_THROWS_WITH_AS(parse("timestamp,carbs,bolus\n2024-01-01T00:00,0,0\n"), doctest::Contains("glucose"),
                       SchemaError);
  CHECK_THROWS_AS(parse("timestamp,glucose,carbs,bolus\n"), SchemaError);
  CHECK_THROWS_WITH_AS(parse("timestamp,glucose,carbs,bolus\nnot-a-time,100,0,0\n"), doctest::Contains("line 2"),
                       SchemaError);
  CHECK_THROWS_AS(parse("timestamp,glucose,carbs,bolus\n2024-01-01T00:00,100,-3,0\n"), SchemaError);
  CHECK_THROWS_AS(parse("timestamp,glucose,carbs,bolus\n2024-01-01T00:00,100,0,0\n2024-01-01T00:07,100,0,0\n"),
                  SchemaError);
  CHECK_THROWS_AS(ingest_csv("/nonexistent/S9.csv"), SchemaError);
}

TEST_CASE("missing sleep column is synthesized from the clock") {
  const SubjectRecord r = parse("timestamp,glucose,carbs,bolus\n2024-01-01T22:55,100,0,0\n2024-01-01T23:00,100,0,0\n"
                                "2024-01-02T06:55,100,0,0\n2024-01-02T07:00,100,0,0\n");
  CHECK(r.sleep_synthesized);
  CHECK(r.ticks[0].sleep == 0);
  CHECK(r.ticks[1].sleep == 1);
  CHECK(r.segment_count() == 2);
  CHECK(default_sleep_flag(23) == 1);
  CHECK(default_sleep_flag(6) == 1);
  CHECK(default_sleep_flag(7) == 0);
}

TEST_CASE("glucose is clamped to [20,600] and timestamps round-trip") {
  const SubjectRecord r = parse("timestamp,glucose,carbs,bolus\n2024-01-01 00:00:00,5,0,0\n2024-01-01T00:05Z,900,0,0\n");
  CHECK(r.ticks[0].glucose == 20.0);
  CHECK(r.ticks[1].glucose == 600.0);
  const std::int64_t t = parse_timestamp("2024-02-29T13:45:00");
  CHECK(parse_timestamp(format_timestamp(t)) == t);
  CHECK(t - parse_timestamp("2024-02-29T00:00") == 13 * 3600 + 45 * 60);
}

TEST_CASE("csv write and re-ingest preserve the record") {
  const auto dir = testsupport::temp_dir("data");
  const SubjectRecord r = parse(testsupport::csv_rows(400));
  write_csv(r, dir / "S5.csv");
  const SubjectRecord back = ingest_csv(dir / "S5.csv");
  CHECK(back.subject_id == "S5");
  REQUIRE(back.size() == r.size());
  for (std::size_t i = 0; i < r.size(); ++i) {
    CHECK(back.ticks[i].time == r.ticks[i].time);
    CHECK(back.ticks[i].glucose == doctest::Approx(r.ticks[i].glucose));
    CHECK(back.ticks[i].carbs == doctest::Approx(r.ticks[i].carbs));
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("split arithmetic") {
  const SplitPlan p = make_split(1000);
  CHECK(p.predictor_train == TickRange{0, 800});
  CHECK(p.rl_pool == TickRange{800, 1000});
  CHECK(p.rl_train == TickRange{800, 960});
  CHECK(p.rl_eval == TickRange{960, 1000});
  CHECK(make_split(10000).rl_train.size() == 1600);
  CHECK_THROWS_AS(make_split(360), ValidationError);
}

TEST_CASE("property: splits are contiguous, disjoint, chronological and deterministic") {
  for (std::size_t n = 361; n < 40000; n = n * 3 / 2 + 7) {
    const SplitPlan p = make_split(n);
    CHECK(p == make_split(n));
    CHECK(p.predictor_train.begin == 0);
    CHECK(p.predictor_train.end == p.rl_pool.begin);
    CHECK(p.rl_pool.end == n);
    CHECK(p.rl_train.begin == p.rl_pool.begin);
    CHECK(p.rl_train.end == p.rl_eval.begin);
    CHECK(p.rl_eval.end == p.rl_pool.end);
    CHECK(p.predictor_train.end - 1 < p.rl_pool.begin);  // no leakage
    CHECK(p.predictor_train.end == n * 8 / 10);
    CHECK(split_from_json(to_json(p)) == p);
  }
}

TEST_CASE("initial state counts and overlap") {
  const SubjectRecord r = parse(testsupport::csv_rows(600));
  CHECK(build_initial_states(r, {100, 172}, 100).size() == 1);
  const auto states = build_initial_states(r, {100, 300}, 100);
  CHECK(states.size() == (200 - 72) / 12 + 1);
  CHECK(build_initial_states(r, {100, 300}, 4).size() == 4);
  CHECK_THROWS_AS(build_initial_states(r, {100, 171}, 100), ValidationError);
  // adjacent windows share 60 of 72 ticks
  for (std::size_t i = 1; i < states.size(); ++i) {
    CHECK(states[i].origin_tick.index - states[i - 1].origin_tick.index == 12);
    for (int k = 0; k < 60; ++k) CHECK(states[i].window.glucose[k] == states[i - 1].window.glucose[k + 12]);
  }
  CHECK(60.0 / 72.0 == doctest::Approx(0.833).epsilon(1e-3));
}

TEST_CASE("property: every initial state window is valid and matches the record") {
  const testsupport::World w = testsupport::make_world(2, 60, 3);
  for (const auto* set : {&w.train_states, &w.eval_states}) {
    REQUIRE_FALSE(set->empty());
    for (const InitialState& s : *set) {
      CHECK(testsupport::window_problem(s.window) == "");
      CHECK_NOTHROW(validate(s.window));
      const auto last = static_cast<std::size_t>(s.origin_tick.index);
      REQUIRE(s.extended_glucose.size() >= 72);
      CHECK(s.extended_glucose.back() == s.window.glucose[71]);
      for (int k = 0; k < 72; ++k) {
        const RecordTick& t = w.record.ticks[last - 71 + k];
        CHECK(s.window.glucose[k] == t.glucose);
        CHECK(s.window.carbs[k] == t.carbs);
        CHECK(s.window.hour_of_day[k] == w.record.hour_of_day(last - 71 + k));
      }
      // elapsed reconstruction by a plain backward scan
      double since = 1440.0;
      for (std::size_t back = 0; back <= 288 && back <= last; ++back) {
        if (w.record.ticks[last - back].carbs > 0.0) {
          since = std::min(1440.0, 5.0 * back);
          break;
        }
      }
      CHECK(s.window.minutes_since_meal[71] == since);
    }
  }
  CHECK(w.train_states.size() == 100);
  CHECK(w.eval_states.size() == 10);
}

TEST_CASE("json round-trips") {
  const testsupport::World w = testsupport::make_world(1, 10, 5);
  const InitialState& s = w.eval_states.front();
  const InitialState back = initial_state_from_json(to_json(s));
  CHECK(back.window == s.window);
  CHECK(back.extended_glucose == s.extended_glucose);
  CHECK(back.origin_tick == s.origin_tick);
  const SubjectRecord r = record_from_json(to_json(w.record));
  CHECK(r.ticks == w.record.ticks);
  CHECK(trailing_mean({1, 2, 3, 4}, 3, 2) == 3.5);
  CHECK(trailing_mean({1, 2, 3, 4}, 1, 200) == 1.5);
}
