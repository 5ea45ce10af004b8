#pragma once

#include <filesystem>
#include <fstream>
#include <vector>

#include "addrforge/eval.hpp"
#include "addrforge/qa_forge.hpp"

namespace addrforge::testkit {

/// One test-split image with four questions; three predictions are right.
inline ConversationSample four_question_sample() {
  ConversationSample s;
  s.id = "pgh/L1/000";
  s.city_id = "pgh";
  s.location_id = "L1";
  s.images = {"views/L1_000.jpg"};
  s.split = Split::test;
  s.truth = {"Grant Street", "Downtown"};

  QuestionTurn gd;
  gd.qtype = QuestionType::generation;
  gd.level = QuestionLevel::district;
  gd.question = "Which district is depicted in the photo? Answer the question using a single word or phrase.";
  gd.answer = "Downtown";

  QuestionTurn js;
  js.qtype = QuestionType::judgment;
  js.level = QuestionLevel::street;
  js.candidate = "Liberty Avenue";
  js.judgment_truth = false;
  js.question = "Can you tell me which road this is? Is this image taken on Liberty Avenue, Yes or No?";
  js.answer = "No";

  QuestionTurn md;
  md.qtype = QuestionType::multiple_choice;
  md.level = QuestionLevel::district;
  md.options = {"Oakland", "Downtown", "Shadyside", "Strip District"};
  md.correct_option = 1;
  md.question =
      "Which district is depicted in the photo? Which of the following district correctly "
      "represents the location shown in the image? (A) Oakland (B) Downtown (C) Shadyside "
      "(D) Strip District. Please select the correct option (A/B/C/D).";
  md.answer = "B";

  QuestionTurn gs;
  gs.qtype = QuestionType::generation;
  gs.level = QuestionLevel::street;
  gs.question = "What thoroughfare is depicted here? Answer the question using a single word or phrase.";
  gs.answer = "Grant Street";

  s.turns = {gd, js, md, gs};
  return s;
}

inline std::vector<PredictionRecord> four_question_predictions() {
  return {{"pgh/L1/000", 1, "downtown"},
          {"pgh/L1/000", 2, "No, it is not."},
          {"pgh/L1/000", 3, "(B)"},
          {"pgh/L1/000", 4, "Liberty Avenue"}};
}

/// Writes gt.jsonl and pred.jsonl for the fixture under `dir`.
inline void write_four_question_fixture(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream gt(dir / "gt.jsonl");
  gt << to_json(four_question_sample()).dump() << '\n';
  gt.close();
  const auto preds = four_question_predictions();
  write_predictions(dir / "pred.jsonl", preds);
}

}  // namespace addrforge::testkit
